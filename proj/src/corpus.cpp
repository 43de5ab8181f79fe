#include "mcblab/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "mcblab/rng.hpp"
#include "json.hpp"

namespace mcb {

using nlohmann::json;

std::string split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw std::runtime_error("unknown split name: " + s);
}

std::vector<std::size_t> Dataset::indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < notes.size(); ++i)
        if (split_assignment[i] == s) out.push_back(i);
    return out;
}

std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> tokens;
    std::size_t n = text.size();
    std::size_t i = 0;
    auto lower = [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); };
    while (i < n) {
        char c = text[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        // [MASK] is reserved as a single token.
        if (c == '[' && i + 6 <= n) {
            std::string six = text.substr(i, 6);
            std::string low;
            for (char ch : six) low += lower(ch);
            if (low == "[mask]") {
                tokens.push_back({"[mask]", i, i + 6});
                i += 6;
                continue;
            }
        }
        if (std::isalnum(static_cast<unsigned char>(c))) {
            std::size_t j = i;
            std::string word;
            while (j < n && std::isalnum(static_cast<unsigned char>(text[j]))) {
                word += lower(text[j]);
                ++j;
            }
            tokens.push_back({word, i, j});
            i = j;
        } else {
            tokens.push_back({std::string(1, c), i, i + 1});
            ++i;
        }
    }
    return tokens;
}

std::vector<std::size_t> find_sentence_breaks(const std::vector<Token>& tokens) {
    std::vector<std::size_t> breaks;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string& t = tokens[i].text;
        if (t == "." || t == "!" || t == "?") breaks.push_back(i);
    }
    return breaks;
}

void retokenize(Note& note) {
    note.tokens = tokenize(note.text);
    note.sentence_breaks = find_sentence_breaks(note.tokens);
}

const std::vector<std::string>& builtin_concept_names() {
    static const std::vector<std::string> names = {
        "fever", "cough", "dyspnea", "pain", "nausea", "vomiting", "diarrhea", "fatigue",
        "headache", "dizziness", "weakness", "confusion", "syncope", "chest", "abdominal",
        "dysphagia", "hemoptysis", "hematuria", "hematemesis", "melena", "jaundice", "edema",
        "rash", "pruritus", "weight", "anorexia", "malaise", "wheezing", "reflux", "constipation",
        "bowel", "hypotension", "hypertension", "tachycardia", "bradycardia", "tachypnea",
        "hypoxia", "hypothermia", "shock", "altered", "lethargic", "obtunded", "cardiac",
        "pulmonary", "renal", "hepatic", "neurologic", "gastrointestinal", "respiratory",
        "cardiovascular", "genitourinary", "musculoskeletal", "endocrine", "hematologic",
        "dermatologic", "psychiatric", "thyroid", "coronary", "prostate", "infection", "sepsis",
        "pneumonia", "uti", "cellulitis", "meningitis", "failure", "infarction", "ischemia",
        "hemorrhage", "thrombosis", "embolism", "obstruction", "perforation", "rupture",
        "stenosis", "regurgitation", "hypertrophy", "atrophy", "neoplasm", "malignancy",
        "metastasis", "fibrillation", "arrhythmia", "elevated", "decreased", "anemia",
        "leukocytosis", "thrombocytopenia", "hyperglycemia", "hypoglycemia", "acidosis",
        "alkalosis", "hypoxemia", "creatinine", "bilirubin", "troponin", "bnp", "lactate", "wbc",
        "cultures", "infiltrate", "consolidation", "effusion", "cardiomegaly", "a1c", "bmi",
        "cholesterol", "lipid", "sodium", "hyponatremia", "ejection", "iron", "ferritin",
        "ultrasound", "ct", "mri", "xray", "echo", "ekg", "stent", "cabg", "antibiotics",
        "diuretics", "vasopressors", "insulin", "anticoagulation", "oxygen", "ventilation",
        "dialysis", "transfusion", "surgery", "metformin", "statin", "inhaler", "cpap", "aspirin",
        "opioid", "ppi", "diabetes", "diabetic", "obesity", "obese", "copd", "asthma",
        "depression", "anxiety", "apnea", "insomnia", "sleep", "smoking", "tobacco", "nicotine",
        "ckd", "gout", "stroke", "tia", "palliative", "hospice", "comfort", "dnr"};
    return names;
}

std::vector<std::uint8_t> apply_label_rules(const std::vector<LabelRule>& rules,
                                            const std::vector<std::uint8_t>& concepts) {
    std::vector<std::uint8_t> y(rules.size(), 0);
    for (std::size_t j = 0; j < rules.size(); ++j) {
        const LabelRule& r = rules[j];
        if (r.is_xor) {
            y[j] = concepts[r.concept_indices[0]] != concepts[r.concept_indices[1]] ? 1 : 0;
        } else {
            double s = 0.0;
            for (std::size_t k = 0; k < r.concept_indices.size(); ++k)
                s += r.weights[k] * concepts[r.concept_indices[k]];
            y[j] = s >= r.threshold ? 1 : 0;
        }
    }
    return y;
}

namespace {

const std::vector<std::string> kPositiveTemplates = {
    "patient has {c} .", "{c} noted on exam .", "reports {c} today ."};

const std::vector<std::string> kPseudoTemplates = {
    "no increase in {c} .", "not only {c} noted .", "{c} managed without difficulty ."};

const std::vector<std::string> kNegatedTemplates = {
    "denies {c} .",        "no {c} .",           "without {c} .",
    "no evidence of {c} .", "negative for {c} .", "rules out {c} .",
    "free of {c} .",        "absent {c} .",       "not {c} ."};

const std::vector<std::string> kFillerWords = {
    "the", "visit", "remains", "stable", "during", "stay", "followup", "arranged",
    "course", "uneventful", "overall", "doing", "well", "discharge", "planned", "home"};

std::string instantiate(const std::string& tmpl, const std::string& concept_name) {
    std::string out = tmpl;
    std::size_t pos = out.find("{c}");
    out.replace(pos, 3, concept_name);
    return out;
}

std::string make_filler(Rng& rng) {
    std::size_t n = 3 + rng.below(3);
    std::string s;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) s += " ";
        s += kFillerWords[rng.below(kFillerWords.size())];
    }
    return s + " .";
}

std::vector<LabelRule> build_label_rules(const GeneratorConfig& cfg, Rng& rng) {
    std::vector<LabelRule> rules(cfg.labels);
    for (std::size_t j = 0; j < cfg.labels; ++j) {
        LabelRule& r = rules[j];
        std::size_t m = 2 + rng.below(std::min<std::size_t>(2, cfg.concepts - 1));
        m = std::min(m, cfg.concepts);
        auto picked = rng.sample_without_replacement(cfg.concepts, m);
        std::sort(picked.begin(), picked.end());
        r.concept_indices = picked;
        double wsum = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            r.weights.push_back(rng.uniform(0.5, 1.5));
            wsum += r.weights.back();
        }
        // Later labels demand a larger share of their concept mass, which
        // pushes their marginals down the long tail.
        double frac = cfg.labels > 1
                          ? 0.25 + 0.35 * static_cast<double>(j) / static_cast<double>(cfg.labels - 1)
                          : 0.4;
        // Snap the threshold to the midpoint of the widest gap between
        // achievable subset sums near the desired quantile, so no note sits
        // arbitrarily close to the decision boundary.
        std::vector<double> sums;
        for (unsigned mask = 0; mask < (1u << m); ++mask) {
            double s = 0.0;
            for (std::size_t k = 0; k < m; ++k)
                if (mask & (1u << k)) s += r.weights[k];
            sums.push_back(s);
        }
        std::sort(sums.begin(), sums.end());
        double target = frac * wsum;
        double best_mid = target, best_gap = -1.0;
        for (std::size_t k = 1; k + 1 < sums.size(); ++k) {
            double gap = sums[k + 1] - sums[k];
            double mid = 0.5 * (sums[k] + sums[k + 1]);
            if (gap < 1e-9) continue;
            if (std::abs(mid - target) > 0.15 * wsum) continue;
            if (gap > best_gap) {
                best_gap = gap;
                best_mid = mid;
            }
        }
        if (best_gap < 0.0) {
            // No gap in the window: take the midpoint nearest the target.
            double best_d = std::numeric_limits<double>::infinity();
            for (std::size_t k = 1; k + 1 < sums.size(); ++k) {
                if (sums[k + 1] - sums[k] < 1e-9) continue;
                double mid = 0.5 * (sums[k] + sums[k + 1]);
                if (std::abs(mid - target) < best_d) {
                    best_d = std::abs(mid - target);
                    best_mid = mid;
                }
            }
        }
        r.threshold = best_mid;
    }
    if (cfg.mapping_mode == MappingMode::Interaction) {
        LabelRule& r = rules[cfg.labels - 1];
        r = LabelRule{};
        r.concept_indices = {0, 1};
        r.weights = {1.0, 1.0};
        r.is_xor = true;
    }
    return rules;
}

}  // namespace

Dataset generate_corpus(const GeneratorConfig& cfg) {
    if (cfg.concepts < 2 || cfg.labels < 2)
        throw std::invalid_argument("generate_corpus: C and L must each be at least 2");
    for (double p : {cfg.negation_rate, cfg.pseudo_negation_rate, cfg.label_noise})
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("generate_corpus: probability out of [0,1]");

    Dataset ds;
    const auto& pool = builtin_concept_names();
    for (std::size_t k = 0; k < cfg.concepts; ++k) {
        if (k < pool.size()) ds.vocabulary.names.push_back(pool[k]);
        else ds.vocabulary.names.push_back("finding" + std::to_string(k));
    }
    for (std::size_t j = 0; j < cfg.labels; ++j) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "dx-%02zu", j);
        ds.label_space.codes.push_back(buf);
    }

    Rng setup_rng(mix_seed(cfg.seed, 0xC0FFEE));
    GeneratorInfo info;
    info.rules = build_label_rules(cfg, setup_rng);
    if (cfg.mapping_mode == MappingMode::Interaction) info.xor_label = cfg.labels - 1;

    std::vector<double> prevalence(cfg.concepts);
    for (std::size_t k = 0; k < cfg.concepts; ++k) {
        prevalence[k] = std::clamp(0.55 * std::pow(cfg.prevalence_decay, static_cast<double>(k)),
                                   0.12, 0.55);
    }
    if (cfg.mapping_mode == MappingMode::Interaction) {
        prevalence[0] = 0.5;
        prevalence[1] = 0.5;
    }

    std::size_t mentions_total = 0, mentions_negated = 0;
    for (std::size_t i = 0; i < cfg.notes_n; ++i) {
        Rng rng(mix_seed(cfg.seed, i + 1));
        Note note;
        char idbuf[24];
        std::snprintf(idbuf, sizeof(idbuf), "note-%06zu", i);
        note.id = idbuf;
        note.true_concepts.assign(cfg.concepts, 0);
        for (std::size_t k = 0; k < cfg.concepts; ++k)
            note.true_concepts[k] = rng.bernoulli(prevalence[k]) ? 1 : 0;

        std::vector<std::string> sentences;
        for (std::size_t k = 0; k < cfg.concepts; ++k) {
            const std::string& name = ds.vocabulary.names[k];
            if (note.true_concepts[k]) {
                if (rng.bernoulli(cfg.pseudo_negation_rate)) {
                    sentences.push_back(instantiate(kPseudoTemplates[rng.below(kPseudoTemplates.size())], name));
                } else {
                    sentences.push_back(instantiate(kPositiveTemplates[rng.below(kPositiveTemplates.size())], name));
                }
                ++mentions_total;
            } else if (rng.bernoulli(cfg.negation_rate)) {
                sentences.push_back(instantiate(kNegatedTemplates[rng.below(kNegatedTemplates.size())], name));
                ++mentions_total;
                ++mentions_negated;
            }
        }
        std::size_t fillers = 1 + rng.below(2);
        for (std::size_t f = 0; f < fillers; ++f) sentences.push_back(make_filler(rng));
        rng.shuffle(sentences);

        std::string text;
        for (std::size_t s = 0; s < sentences.size(); ++s) {
            if (s) text += " ";
            text += sentences[s];
        }
        note.text = text;
        retokenize(note);

        note.labels = apply_label_rules(info.rules, note.true_concepts);
        for (std::size_t j = 0; j < cfg.labels; ++j)
            if (rng.bernoulli(cfg.label_noise)) note.labels[j] = note.labels[j] ? 0 : 1;

        ds.notes.push_back(std::move(note));
    }
    info.realized_negated_share =
        mentions_total == 0 ? 0.0
                            : static_cast<double>(mentions_negated) / static_cast<double>(mentions_total);
    ds.generator_info = std::move(info);
    return split_dataset(std::move(ds), 0.7, 0.15, 0.15, cfg.seed);
}

Dataset split_dataset(Dataset dataset, double r_train, double r_val, double r_test,
                      std::uint64_t seed) {
    if (r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0)
        throw std::invalid_argument("split_dataset: ratios must be positive");
    if (std::abs(r_train + r_val + r_test - 1.0) > 1e-9)
        throw std::invalid_argument("split_dataset: ratios must sum to 1");

    std::size_t n = dataset.notes.size();
    double ratios[3] = {r_train, r_val, r_test};
    std::size_t counts[3];
    double fracs[3];
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
        double exact = ratios[s] * static_cast<double>(n);
        counts[s] = static_cast<std::size_t>(std::floor(exact));
        fracs[s] = exact - std::floor(exact);
        assigned += counts[s];
    }
    // Remaining seats by largest fractional part; ties favor the earlier split
    // (train first), which keeps the remainder with train.
    while (assigned < n) {
        int best = 0;
        for (int s = 1; s < 3; ++s)
            if (fracs[s] > fracs[best]) best = s;
        ++counts[best];
        fracs[best] = -1.0;
        ++assigned;
    }

    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(mix_seed(seed, 0x5911));
    rng.shuffle(idx);

    dataset.split_assignment.assign(n, Split::Train);
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
        for (std::size_t c = 0; c < counts[s]; ++c)
            dataset.split_assignment[idx[pos++]] = static_cast<Split>(s);
    }
    return dataset;
}

namespace {

json rule_to_json(const LabelRule& r) {
    json j;
    j["concepts"] = r.concept_indices;
    j["weights"] = r.weights;
    j["threshold"] = r.threshold;
    j["xor"] = r.is_xor;
    return j;
}

LabelRule rule_from_json(const json& j) {
    LabelRule r;
    r.concept_indices = j.at("concepts").get<std::vector<std::size_t>>();
    r.weights = j.at("weights").get<std::vector<double>>();
    r.threshold = j.at("threshold").get<double>();
    r.is_xor = j.at("xor").get<bool>();
    return r;
}

}  // namespace

void save_corpus(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    json header;
    header["format"] = "mcb-corpus";
    header["version"] = 1;
    header["C"] = ds.vocabulary.size();
    header["L"] = ds.label_space.size();
    header["vocabulary"] = ds.vocabulary.names;
    header["labels"] = ds.label_space.codes;
    if (ds.generator_info) {
        json gen;
        gen["negated_share"] = ds.generator_info->realized_negated_share;
        json rules = json::array();
        for (const LabelRule& r : ds.generator_info->rules) rules.push_back(rule_to_json(r));
        gen["rules"] = rules;
        if (ds.generator_info->xor_label) gen["xor_label"] = *ds.generator_info->xor_label;
        header["generator"] = gen;
    }
    out << header.dump() << "\n";
    for (std::size_t i = 0; i < ds.notes.size(); ++i) {
        const Note& n = ds.notes[i];
        json rec;
        rec["id"] = n.id;
        rec["text"] = n.text;
        json concepts = json::array();
        for (std::size_t k = 0; k < n.true_concepts.size(); ++k)
            if (n.true_concepts[k]) concepts.push_back(k);
        rec["concepts"] = concepts;
        json labels = json::array();
        for (std::size_t j = 0; j < n.labels.size(); ++j)
            if (n.labels[j]) labels.push_back(j);
        rec["labels"] = labels;
        rec["split"] = split_name(ds.split_assignment[i]);
        out << rec.dump() << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

Dataset load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    std::size_t lineno = 0;
    auto parse_line = [&](const std::string& l) -> json {
        try {
            return json::parse(l);
        } catch (const json::exception& e) {
            throw std::runtime_error("corpus parse error at line " + std::to_string(lineno) + ": " +
                                     e.what());
        }
    };

    if (!std::getline(in, line)) throw std::runtime_error("corpus parse error at line 1: empty file");
    ++lineno;
    json header = parse_line(line);
    Dataset ds;
    try {
        if (header.at("format").get<std::string>() != "mcb-corpus")
            throw std::runtime_error("not a corpus file");
        ds.vocabulary.names = header.at("vocabulary").get<std::vector<std::string>>();
        ds.label_space.codes = header.at("labels").get<std::vector<std::string>>();
        if (header.at("C").get<std::size_t>() != ds.vocabulary.size() ||
            header.at("L").get<std::size_t>() != ds.label_space.size())
            throw std::runtime_error("header C/L inconsistent with name lists");
        if (header.contains("generator")) {
            GeneratorInfo info;
            const json& gen = header["generator"];
            info.realized_negated_share = gen.at("negated_share").get<double>();
            for (const json& rj : gen.at("rules")) info.rules.push_back(rule_from_json(rj));
            if (gen.contains("xor_label")) info.xor_label = gen["xor_label"].get<std::size_t>();
            ds.generator_info = std::move(info);
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("corpus parse error at line 1: " + std::string(e.what()));
    }

    std::size_t C = ds.vocabulary.size(), L = ds.label_space.size();
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json rec = parse_line(line);
        Note n;
        try {
            n.id = rec.at("id").get<std::string>();
            n.text = rec.at("text").get<std::string>();
            n.true_concepts.assign(C, 0);
            for (std::size_t k : rec.at("concepts").get<std::vector<std::size_t>>()) {
                if (k >= C) throw std::runtime_error("concept index out of range");
                n.true_concepts[k] = 1;
            }
            n.labels.assign(L, 0);
            for (std::size_t j : rec.at("labels").get<std::vector<std::size_t>>()) {
                if (j >= L) throw std::runtime_error("label index out of range");
                n.labels[j] = 1;
            }
            ds.split_assignment.push_back(split_from_name(rec.at("split").get<std::string>()));
        } catch (const json::exception& e) {
            throw std::runtime_error("corpus parse error at line " + std::to_string(lineno) + ": " +
                                     e.what());
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("corpus parse error at line " + std::to_string(lineno) + ": " +
                                     e.what());
        }
        retokenize(n);
        ds.notes.push_back(std::move(n));
    }
    return ds;
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
    if (a.vocabulary.names != b.vocabulary.names) return false;
    if (a.label_space.codes != b.label_space.codes) return false;
    if (a.notes.size() != b.notes.size()) return false;
    if (a.split_assignment != b.split_assignment) return false;
    for (std::size_t i = 0; i < a.notes.size(); ++i) {
        const Note& x = a.notes[i];
        const Note& y = b.notes[i];
        if (x.id != y.id || x.text != y.text) return false;
        if (x.true_concepts != y.true_concepts || x.labels != y.labels) return false;
    }
    return true;
}

}  // namespace mcb
