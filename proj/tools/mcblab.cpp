// Command-line laboratory driver: corpus generation, pseudo-labeling,
// training, evaluation, interpretability and statistical comparison.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "mcblab/corpus.hpp"
#include "mcblab/interpret.hpp"
#include "mcblab/metrics.hpp"
#include "mcblab/model.hpp"
#include "mcblab/negex.hpp"
#include "mcblab/stats.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace mcb;

namespace {

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config file not found: " + path);
    json j;
    in >> j;
    return j;
}

void write_json(const json& j, const fs::path& path) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << j.dump(2) << "\n";
}

void write_resolved(const json& cfg, const std::string& command, const fs::path& out_dir) {
    json j = cfg;
    j["command"] = command;
    write_json(j, out_dir / "config.resolved.json");
}

void require_file(const std::string& path, const char* what) {
    if (path.empty() || !fs::exists(path))
        throw std::runtime_error(std::string(what) + " not found: " +
                                 (path.empty() ? "(unset)" : path));
}

// Flag value if the user passed it, else config[section][key], else the default
// already stored in `value`.
template <class T>
void resolve(const CLI::App* cmd, const std::string& flag, json& cfg, const std::string& section,
             const std::string& key, T& value) {
    if (cmd->count(flag) == 0 && cfg.contains(section) && cfg[section].contains(key))
        value = cfg[section][key].get<T>();
    cfg[section][key] = value;
}

struct PseudoFile {
    std::vector<std::string> ids;
    std::vector<std::vector<std::uint8_t>> rows;
};

void save_pseudo(const Dataset& ds, const std::vector<std::vector<std::uint8_t>>& ct,
                 const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    json header = {{"format", "pseudo-labels"},
                   {"version", 1},
                   {"n", ds.notes.size()},
                   {"concepts", ds.vocabulary.size()}};
    out << header.dump() << "\n";
    for (std::size_t i = 0; i < ds.notes.size(); ++i) {
        json rec;
        rec["id"] = ds.notes[i].id;
        rec["ctilde"] = ct[i];
        out << rec.dump() << "\n";
    }
}

std::vector<std::vector<std::uint8_t>> load_pseudo(const Dataset& ds, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("pseudo-label file not found: " + path);
    std::string line;
    std::getline(in, line);
    json header = json::parse(line);
    if (header.value("format", "") != "pseudo-labels")
        throw std::runtime_error("not a pseudo-label file: " + path);
    std::unordered_map<std::string, std::vector<std::uint8_t>> by_id;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        by_id[rec.at("id").get<std::string>()] =
            rec.at("ctilde").get<std::vector<std::uint8_t>>();
    }
    std::vector<std::vector<std::uint8_t>> out;
    out.reserve(ds.notes.size());
    for (const Note& n : ds.notes) {
        auto it = by_id.find(n.id);
        if (it == by_id.end())
            throw std::runtime_error("pseudo-label file missing note " + n.id);
        if (it->second.size() != ds.vocabulary.size())
            throw std::runtime_error("pseudo-label width mismatch for note " + n.id);
        out.push_back(it->second);
    }
    return out;
}

PredictionSet predict_split(Model& model, const Dataset& ds,
                            const std::vector<std::vector<std::uint8_t>>& ct, Split split,
                            double tau) {
    auto idx = ds.indices_of(split);
    PredictionSet p;
    p.tau = tau;
    p.init(idx.size(), model.L, model.C);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        std::size_t i = idx[r];
        ModelOutput out = model.forward(ds.notes[i]);
        p.ids[r] = ds.notes[i].id;
        for (std::size_t j = 0; j < model.L; ++j) {
            p.scores.at(r, j) = out.probs.v[j];
            p.labels.at(r, j) = ds.notes[i].labels[j];
        }
        for (std::size_t k = 0; k < model.C; ++k) {
            p.chat.at(r, k) = out.chat.v[k];
            p.ctilde.at(r, k) = ct[i][k];
        }
    }
    p.threshold();
    return p;
}

std::vector<std::size_t> train_label_counts(const Dataset& ds) {
    std::vector<std::size_t> counts(ds.label_space.size(), 0);
    for (std::size_t i : ds.indices_of(Split::Train))
        for (std::size_t j = 0; j < counts.size(); ++j) counts[j] += ds.notes[i].labels[j];
    return counts;
}

json metrics_report(const PredictionSet& pred, const Dataset& ds,
                    const std::vector<std::size_t>& ks) {
    json rep;
    F1Result f1 = f1_scores(pred);
    rep["macro_f1"] = f1.macro;
    rep["micro_f1"] = f1.micro;
    rep["per_label_f1"] = f1.per_label;
    AucResult auc = auc_scores(pred);
    rep["macro_auc"] = auc.macro;
    rep["micro_auc"] = auc.micro;
    rep["auc_skipped_labels"] = auc.skipped_labels;
    PrecisionRecall pr = precision_recall_decomposition(pred);
    rep["macro_precision"] = pr.macro_p;
    rep["macro_recall"] = pr.macro_r;
    rep["micro_precision"] = pr.micro_p;
    rep["micro_recall"] = pr.micro_r;
    json topk = json::array();
    for (const TopKResult& t : topk_metrics(pred, ks))
        topk.push_back({{"k", t.k}, {"precision", t.precision}, {"recall", t.recall}});
    rep["topk"] = topk;
    auto counts = train_label_counts(ds);
    auto bins = longtail_binned_f1(pred, counts, default_bin_sizes(pred.n_labels()));
    json jb = json::array();
    for (const LongtailBin& b : bins)
        jb.push_back({{"bin", b.name}, {"labels", b.label_indices}, {"macro_f1", b.macro_f1}});
    rep["longtail"] = jb;
    return rep;
}

TopCMap topc_from_train(const Dataset& ds, const std::vector<std::vector<std::uint8_t>>& ct) {
    auto idx = ds.indices_of(Split::Train);
    Array ctilde = Array::zeros({idx.size(), ds.vocabulary.size()});
    Array labels = Array::zeros({idx.size(), ds.label_space.size()});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        for (std::size_t a = 0; a < ds.vocabulary.size(); ++a)
            ctilde.at(r, a) = ct[idx[r]][a];
        for (std::size_t j = 0; j < ds.label_space.size(); ++j)
            labels.at(r, j) = ds.notes[idx[r]].labels[j];
    }
    return build_topc(ctilde, labels, 5);
}

int run(int argc, char** argv) {
    CLI::App app{"Concept-bottleneck laboratory"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "runs/out", corpus_path, checkpoint_path;
    std::string pred_path, pred_b_path, pseudo_path, lexicon_path;
    std::uint64_t seed = 42;
    double tau = 0.5;
    std::size_t bootstrap_b = 1000, n_pairs = 500;
    std::vector<std::size_t> k_list = {5};
    std::string model_name = "mcb", ablation = "full", mapping = "linear", split = "test";
    std::size_t notes_n = 2000, concepts_n = 12, labels_n = 6, epochs = 10;
    bool full_cross = false;

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "JSON config file; flags override");
        c->add_option("--seed", seed, "global seed");
        c->add_option("--out", out_dir, "output directory");
        return c;
    };

    CLI::App* gen = add_common(app.add_subcommand("gen-data", "generate a synthetic corpus"));
    gen->add_option("--mode", mapping, "linear|interaction");
    gen->add_option("--notes", notes_n, "number of notes");
    gen->add_option("--concepts", concepts_n, "number of concepts");
    gen->add_option("--labels", labels_n, "number of labels");

    CLI::App* pl = add_common(app.add_subcommand("pseudo-label", "negation-aware concept columns"));
    pl->add_option("--corpus", corpus_path, "corpus file")->required();
    pl->add_option("--lexicon", lexicon_path, "trigger lexicon file");

    CLI::App* tr = add_common(app.add_subcommand("train", "train a model"));
    tr->add_option("--corpus", corpus_path, "corpus file")->required();
    tr->add_option("--model", model_name, "mcb|vcbm");
    tr->add_option("--ablation", ablation, "full|no_align|no_crossattn");
    tr->add_option("--epochs", epochs, "training epochs");
    tr->add_option("--tau", tau, "decision threshold");
    tr->add_option("--pseudo", pseudo_path, "pseudo-label file (else computed)");
    tr->add_option("--lexicon", lexicon_path, "trigger lexicon file");

    CLI::App* ev = add_common(app.add_subcommand("eval", "metrics + prediction dump"));
    ev->add_option("--corpus", corpus_path, "corpus file")->required();
    ev->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    ev->add_option("--tau", tau, "decision threshold");
    ev->add_option("--split", split, "train|val|test");
    ev->add_option("--k-list", k_list, "K values for P@K/R@K");
    ev->add_option("--pseudo", pseudo_path, "pseudo-label file (else computed)");
    ev->add_option("--lexicon", lexicon_path, "trigger lexicon file");

    CLI::App* ip = add_common(app.add_subcommand("interpret", "faithfulness report"));
    ip->add_option("--corpus", corpus_path, "corpus file")->required();
    ip->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    ip->add_option("--predictions", pred_path, "prediction dump")->required();
    ip->add_flag("--full-cross-product", full_cross, "all (concept, label) pairs");
    ip->add_option("--pseudo", pseudo_path, "pseudo-label file (else computed)");
    ip->add_option("--lexicon", lexicon_path, "trigger lexicon file");

    CLI::App* iv = add_common(app.add_subcommand("intervene", "concept-mask intervention"));
    iv->add_option("--corpus", corpus_path, "corpus file")->required();
    iv->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    iv->add_option("--predictions", pred_path, "prediction dump")->required();
    iv->add_option("--pairs", n_pairs, "max (note, label) pairs");
    iv->add_option("--bootstrap-b", bootstrap_b, "bootstrap replicates");
    iv->add_option("--pseudo", pseudo_path, "pseudo-label file (else computed)");
    iv->add_option("--lexicon", lexicon_path, "trigger lexicon file");

    CLI::App* cp = add_common(app.add_subcommand("compare", "paired bootstrap of two dumps"));
    cp->add_option("--a", pred_path, "prediction dump A")->required();
    cp->add_option("--b", pred_b_path, "prediction dump B")->required();
    cp->add_option("--bootstrap-b", bootstrap_b, "bootstrap replicates");

    CLI::App* rp = add_common(app.add_subcommand("report", "aggregate run artifacts"));
    rp->add_option("--in", corpus_path, "run directory to aggregate")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);          // prints the diagnostic and usage hint
        std::cerr << app.help();
        return 2;
    }
    CLI::App* cmd = app.get_subcommands().front();
    json cfg = load_config(config_path);
    fs::path out(out_dir);
    fs::create_directories(out);

    auto lexicon = [&]() {
        return lexicon_path.empty() ? TriggerLexicon::defaults()
                                    : TriggerLexicon::load(lexicon_path);
    };
    auto pseudo_for = [&](const Dataset& ds) {
        return pseudo_path.empty() ? compute_pseudo_labels(ds, lexicon())
                                   : load_pseudo(ds, pseudo_path);
    };

    if (cmd == gen) {
        GeneratorConfig g;
        g.seed = seed;
        resolve(cmd, "--mode", cfg, "generator", "mode", mapping);
        resolve(cmd, "--notes", cfg, "generator", "notes", notes_n);
        resolve(cmd, "--concepts", cfg, "generator", "concepts", concepts_n);
        resolve(cmd, "--labels", cfg, "generator", "labels", labels_n);
        resolve(cmd, "--seed", cfg, "generator", "seed", g.seed);
        if (mapping != "linear" && mapping != "interaction")
            throw std::runtime_error("unknown mapping mode: " + mapping);
        g.mapping_mode = mapping == "linear" ? MappingMode::Linear : MappingMode::Interaction;
        g.notes_n = notes_n;
        g.concepts = concepts_n;
        g.labels = labels_n;
        if (cfg.contains("generator")) {
            const json& gen_cfg = cfg["generator"];
            g.negation_rate = gen_cfg.value("negation_rate", g.negation_rate);
            g.pseudo_negation_rate = gen_cfg.value("pseudo_negation_rate", g.pseudo_negation_rate);
            g.label_noise = gen_cfg.value("label_noise", g.label_noise);
            g.prevalence_decay = gen_cfg.value("prevalence_decay", g.prevalence_decay);
        }
        Dataset ds = generate_corpus(g);
        save_corpus(ds, (out / "corpus.jsonl").string());
        write_resolved(cfg, "gen-data", out);
        std::cout << "wrote " << (out / "corpus.jsonl").string() << " (" << ds.notes.size()
                  << " notes)\n";
        return 0;
    }

    if (cmd == pl) {
        require_file(corpus_path, "corpus");
        Dataset ds = load_corpus(corpus_path);
        auto ct = compute_pseudo_labels(ds, lexicon());
        save_pseudo(ds, ct, out / "pseudo_labels.jsonl");
        std::vector<const Note*> train_notes;
        for (std::size_t i : ds.indices_of(Split::Train)) train_notes.push_back(&ds.notes[i]);
        json stats = {{"correction_rate", correction_rate(train_notes, ds.vocabulary, lexicon())}};
        write_json(stats, out / "pseudo_label_stats.json");
        write_resolved(cfg, "pseudo-label", out);
        std::cout << "wrote " << (out / "pseudo_labels.jsonl").string() << "\n";
        return 0;
    }

    if (cmd == tr) {
        require_file(corpus_path, "corpus");
        Dataset ds = load_corpus(corpus_path);
        TrainConfig tc;
        resolve(cmd, "--model", cfg, "model", "kind", model_name);
        resolve(cmd, "--ablation", cfg, "model", "ablation", ablation);
        resolve(cmd, "--epochs", cfg, "train", "epochs", epochs);
        resolve(cmd, "--tau", cfg, "train", "tau", tau);
        resolve(cmd, "--seed", cfg, "train", "seed", seed);
        tc.epochs = epochs;
        tc.tau = tau;
        tc.seed = seed;
        tc.ablation = ablation_from_name(ablation);
        if (cfg.contains("train")) {
            const json& t = cfg["train"];
            tc.lambda_diag = t.value("lambda_diag", tc.lambda_diag);
            tc.lambda_align = t.value("lambda_align", tc.lambda_align);
            tc.lambda_concept = t.value("lambda_concept", tc.lambda_concept);
            tc.batch_size = t.value("batch_size", tc.batch_size);
            tc.opt.lr = t.value("lr", tc.opt.lr);
            tc.opt.weight_decay = t.value("weight_decay", tc.opt.weight_decay);
            tc.focal_gamma = t.value("focal_gamma", tc.focal_gamma);
            tc.focal_alpha = t.value("focal_alpha", tc.focal_alpha);
        }
        EncoderConfig enc;
        if (cfg.contains("encoder")) {
            const json& e = cfg["encoder"];
            enc.h = e.value("h", enc.h);
            enc.layers = e.value("layers", enc.layers);
            enc.heads = e.value("heads", enc.heads);
            enc.max_len = e.value("max_len", enc.max_len);
        }
        TokenVocab vocab = TokenVocab::build(ds);
        enc.vocab_size = vocab.size();
        Model model = Model::make(kind_from_name(model_name), enc, ds.vocabulary, ds.label_space,
                                  vocab, tc.ablation, seed);
        model.tau = tau;
        auto ct = pseudo_for(ds);
        TrainResult res = train_model(model, ds, ct, tc);
        model.save_checkpoint((out / "checkpoint.json").string());
        std::ofstream curves(out / "curves.csv");
        curves << "epoch,loss_total,loss_diag,loss_align,loss_concept,val_macro_f1,val_micro_f1\n";
        for (const EpochStats& e : res.curves)
            curves << e.epoch << "," << e.loss_total << "," << e.loss_diag << "," << e.loss_align
                   << "," << e.loss_concept << "," << e.val_macro_f1 << "," << e.val_micro_f1
                   << "\n";
        write_json({{"best_epoch", res.best_epoch}, {"best_val_macro_f1", res.best_val_macro_f1}},
                   out / "train_summary.json");
        write_resolved(cfg, "train", out);
        std::cout << "best val macro-F1 " << res.best_val_macro_f1 << " at epoch "
                  << res.best_epoch << "\n";
        return 0;
    }

    if (cmd == ev) {
        require_file(corpus_path, "corpus");
        require_file(checkpoint_path, "checkpoint");
        Dataset ds = load_corpus(corpus_path);
        Model model = Model::load_checkpoint(checkpoint_path);
        resolve(cmd, "--tau", cfg, "eval", "tau", tau);
        resolve(cmd, "--split", cfg, "eval", "split", split);
        auto ct = pseudo_for(ds);
        PredictionSet pred = predict_split(model, ds, ct, split_from_name(split), tau);
        pred.save((out / "predictions.jsonl").string());
        write_json(metrics_report(pred, ds, k_list), out / "metrics.json");
        write_resolved(cfg, "eval", out);
        std::cout << "wrote " << (out / "metrics.json").string() << "\n";
        return 0;
    }

    if (cmd == ip) {
        require_file(corpus_path, "corpus");
        require_file(checkpoint_path, "checkpoint");
        require_file(pred_path, "prediction dump");
        Dataset ds = load_corpus(corpus_path);
        Model model = Model::load_checkpoint(checkpoint_path);
        PredictionSet pred = PredictionSet::load(pred_path);
        auto ct = pseudo_for(ds);
        TopCMap topc = topc_from_train(ds, ct);
        CstprResult cs = cstpr(pred, topc);
        CimResult head = cim_head(model, pred, ds, topc, full_cross);
        CimResult common = cim_common_surface(model, pred, ds, topc, full_cross);
        CcrResult cr = ccr(pred, topc);
        json rep;
        rep["cstpr_macro"] = cs.macro;
        rep["cstpr_per_label"] = cs.per_label;
        rep["cim_head"] = head.aggregate;
        rep["cim_common_surface"] = common.aggregate;
        rep["ccr"] = cr.aggregate;
        json jt = json::array();
        for (std::size_t j = 0; j < topc.per_label.size(); ++j) {
            json row = json::array();
            for (const TopCEntry& e : topc.per_label[j])
                row.push_back({{"concept", e.concept_index}, {"r", e.r}});
            jt.push_back(row);
        }
        rep["topc"] = jt;
        write_json(rep, out / "interpret.json");
        std::ofstream csv(out / "cim_pairs.csv");
        csv << "surface,concept,label,value,support\n";
        for (const CimPair& p : head.pairs)
            csv << "head," << p.concept_index << "," << p.label_index << "," << p.value << ","
                << p.support << "\n";
        for (const CimPair& p : common.pairs)
            csv << "common," << p.concept_index << "," << p.label_index << "," << p.value << ","
                << p.support << "\n";
        std::ofstream ccsv(out / "ccr_pairs.csv");
        ccsv << "concept,label,value,support\n";
        for (const CcrPair& p : cr.pairs)
            ccsv << p.concept_index << "," << p.label_index << "," << p.value << "," << p.support
                 << "\n";
        write_resolved(cfg, "interpret", out);
        std::cout << "wrote " << (out / "interpret.json").string() << "\n";
        return 0;
    }

    if (cmd == iv) {
        require_file(corpus_path, "corpus");
        require_file(checkpoint_path, "checkpoint");
        require_file(pred_path, "prediction dump");
        Dataset ds = load_corpus(corpus_path);
        Model model = Model::load_checkpoint(checkpoint_path);
        PredictionSet pred = PredictionSet::load(pred_path);
        auto ct = pseudo_for(ds);
        TopCMap topc = topc_from_train(ds, ct);
        InterventionSummary s =
            mask_intervention(model, pred, ds, topc, n_pairs, seed, bootstrap_b);
        json rep;
        rep["n_records"] = s.records.size();
        rep["n_valid"] = s.n_valid;
        rep["mean_target_drop"] = s.mean_target_drop;
        rep["mean_control_drop"] = s.mean_control_drop;
        rep["mean_difference"] = s.mean_difference;
        rep["difference_ci"] = {s.difference_ci.ci_low, s.difference_ci.ci_high};
        rep["wins"] = s.wins;
        rep["ties"] = s.ties;
        rep["sign_test_p"] = s.sign_test_p;
        write_json(rep, out / "intervention.json");
        std::ofstream csv(out / "intervention_records.csv");
        csv << "note_id,label,valid,p_before,p_after,target_drop,control_drop\n";
        for (const InterventionRecord& r : s.records)
            csv << r.note_id << "," << r.label << "," << (r.valid ? 1 : 0) << "," << r.p_before
                << "," << r.p_after << "," << r.target_drop << "," << r.control_drop << "\n";
        write_resolved(cfg, "intervene", out);
        std::cout << "wrote " << (out / "intervention.json").string() << "\n";
        return 0;
    }

    if (cmd == cp) {
        require_file(pred_path, "prediction dump A");
        require_file(pred_b_path, "prediction dump B");
        PredictionSet a = PredictionSet::load(pred_path);
        PredictionSet b = PredictionSet::load(pred_b_path);
        struct Named {
            const char* name;
            MetricFn fn;
        };
        std::vector<Named> metrics = {
            {"macro_f1", [](const PredictionSet& p) { return f1_scores(p).macro; }},
            {"micro_f1", [](const PredictionSet& p) { return f1_scores(p).micro; }},
            {"macro_auc", [](const PredictionSet& p) { return auc_scores(p).macro; }},
        };
        json rep;
        for (const Named& m : metrics) {
            BootstrapResult r = paired_bootstrap(m.fn, a, b, bootstrap_b, seed);
            rep[m.name] = {{"delta_point", r.delta_point},
                           {"ci_low", r.ci_low},
                           {"ci_high", r.ci_high},
                           {"p_two_sided", r.p_two_sided},
                           {"b", r.b},
                           {"seed", r.seed}};
        }
        write_json(rep, out / "compare.json");
        write_resolved(cfg, "compare", out);
        std::cout << "wrote " << (out / "compare.json").string() << "\n";
        return 0;
    }

    if (cmd == rp) {
        fs::path dir(corpus_path);
        if (!fs::exists(dir)) throw std::runtime_error("run directory not found: " + dir.string());
        json rep;
        for (const char* name :
             {"metrics.json", "interpret.json", "intervention.json", "compare.json",
              "train_summary.json", "pseudo_label_stats.json"}) {
            fs::path p = dir / name;
            if (!fs::exists(p)) continue;
            std::ifstream in(p);
            json j;
            in >> j;
            std::string key(name);
            rep[key.substr(0, key.find('.'))] = j;
        }
        write_json(rep, out / "report.json");
        // Flat plot data from any curves the run produced.
        fs::path curves = dir / "curves.csv";
        if (fs::exists(curves) && fs::absolute(dir) != fs::absolute(out))
            fs::copy_file(curves, out / "curves.csv", fs::copy_options::overwrite_existing);
        write_resolved(cfg, "report", out);
        std::cout << "wrote " << (out / "report.json").string() << "\n";
        return 0;
    }

    return 2;  // unreachable with require_subcommand(1)
}

}  // namespace

int main(int argc, char** argv) {
    // Unknown commands get usage + exit 2; runtime failures (missing files,
    // malformed inputs) get a diagnostic + exit 1.
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
