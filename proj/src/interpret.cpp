#include "mcblab/interpret.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "mcblab/rng.hpp"

namespace mcb {

TopCMap build_topc(const Array& ctilde, const Array& labels, std::size_t k) {
    std::size_t n = ctilde.shape[0], c = ctilde.shape[1], l = labels.shape[1];
    if (n == 0 || labels.shape[0] != n)
        throw std::invalid_argument("build_topc: empty split or row mismatch");
    double nd = static_cast<double>(n);

    // Column means and variances once; Pearson from centered dot products.
    std::vector<double> cmean(c, 0.0), cvar(c, 0.0), lmean(l, 0.0), lvar(l, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < c; ++a) cmean[a] += ctilde.at(i, a);
        for (std::size_t j = 0; j < l; ++j) lmean[j] += labels.at(i, j);
    }
    for (std::size_t a = 0; a < c; ++a) cmean[a] /= nd;
    for (std::size_t j = 0; j < l; ++j) lmean[j] /= nd;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < c; ++a) {
            double d = ctilde.at(i, a) - cmean[a];
            cvar[a] += d * d;
        }
        for (std::size_t j = 0; j < l; ++j) {
            double d = labels.at(i, j) - lmean[j];
            lvar[j] += d * d;
        }
    }

    TopCMap map;
    map.k = std::min(k, c);
    map.per_label.resize(l);
    for (std::size_t j = 0; j < l; ++j) {
        std::vector<TopCEntry> all(c);
        for (std::size_t a = 0; a < c; ++a) {
            double cov = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                cov += (ctilde.at(i, a) - cmean[a]) * (labels.at(i, j) - lmean[j]);
            double denom = std::sqrt(cvar[a] * lvar[j]);
            all[a] = {a, denom == 0.0 ? 0.0 : cov / denom};
        }
        std::stable_sort(all.begin(), all.end(),
                         [](const TopCEntry& x, const TopCEntry& y) { return x.r > y.r; });
        all.resize(map.k);
        map.per_label[j] = std::move(all);
    }
    return map;
}

CstprResult cstpr(const PredictionSet& pred, const TopCMap& topc) {
    std::size_t n = pred.n_samples(), l = pred.n_labels();
    if (topc.per_label.size() != l) throw std::invalid_argument("cstpr: TopC map label mismatch");
    CstprResult r;
    r.per_label.assign(l, -1.0);
    double sum = 0.0;
    std::size_t valid = 0;
    for (std::size_t j = 0; j < l; ++j) {
        std::size_t pos = 0, supported = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (pred.labels.at(i, j) < 0.5) continue;
            ++pos;
            if (pred.decisions.at(i, j) < 0.5) continue;
            for (const TopCEntry& e : topc.per_label[j]) {
                if (pred.chat.at(i, e.concept_index) > 0.5 &&
                    pred.ctilde.at(i, e.concept_index) > 0.5) {
                    ++supported;
                    break;
                }
            }
        }
        if (pos == 0) {
            r.skipped_labels.push_back(j);
            continue;
        }
        r.per_label[j] = static_cast<double>(supported) / static_cast<double>(pos);
        sum += r.per_label[j];
        ++valid;
    }
    if (valid == 0) throw std::runtime_error("cstpr: no label has positives");
    r.macro = sum / static_cast<double>(valid);
    return r;
}

namespace {

// J_{z<-u} for one LayerNorm application: J[a][b] = gamma_a/s (d_ab - 1/h - f_a f_b / h).
Array layer_norm_jacobian(const Array& u, const Array& gamma, double eps) {
    std::size_t h = u.v.size();
    double m = std::accumulate(u.v.begin(), u.v.end(), 0.0) / static_cast<double>(h);
    double var = 0.0;
    for (double x : u.v) var += (x - m) * (x - m);
    var /= static_cast<double>(h);
    double s = std::sqrt(var + eps);
    std::vector<double> f(h);
    for (std::size_t a = 0; a < h; ++a) f[a] = (u.v[a] - m) / s;
    Array j({h, h});
    double inv_h = 1.0 / static_cast<double>(h);
    for (std::size_t a = 0; a < h; ++a)
        for (std::size_t b = 0; b < h; ++b) {
            double d = (a == b ? 1.0 : 0.0) - inv_h - f[a] * f[b] * inv_h;
            j.at(a, b) = gamma.v[a] / s * d;
        }
    return j;
}

// diag(sig'(h2)) W2 diag(1[h1>0]) W1_block, where the block is columns
// [col0, col0+h) of W1. Result is h x h.
Array gate_jacobian_block(const Model& model, const ModelOutput& out, std::size_t col0) {
    std::size_t h = model.enc.h, dg = model.gate_hidden;
    Array j = Array::zeros({h, h});
    for (std::size_t a = 0; a < h; ++a) {
        double sp = out.g.v[a] * (1.0 - out.g.v[a]);
        for (std::size_t b = 0; b < h; ++b) {
            double acc = 0.0;
            for (std::size_t q = 0; q < dg; ++q) {
                if (out.h1.v[q] <= 0.0) continue;  // indicator 0 at exactly 0
                acc += model.gate_w2.value.at(a, q) * model.gate_w1.value.at(q, col0 + b);
            }
            j.at(a, b) = sp * acc;
        }
    }
    return j;
}

Array matprod(const Array& a, const Array& b) {
    Array c = Array::zeros({a.shape[0], b.shape[1]});
    gemm(a, false, b, false, c, false);
    return c;
}

}  // namespace

Array cim_head_gradients(const Model& model, const ModelOutput& out) {
    if (model.kind == ModelKind::VCBM) return model.w_d.value;  // L x C, constant
    std::size_t h = model.enc.h;
    Array jzu = layer_norm_jacobian(out.u, model.ln_gamma.value, kLayerNormEps);
    Array jgpc = gate_jacobian_block(model, out, h);  // p_c block of W1
    // J_{u<-p_c} = diag(g) + diag(p_c) J_{g<-p_c}
    Array jupc = jgpc;
    for (std::size_t a = 0; a < h; ++a) {
        for (std::size_t b = 0; b < h; ++b) jupc.at(a, b) *= out.p_c.v[a];
        jupc.at(a, a) += out.g.v[a];
    }
    return matprod(model.w_d.value, matprod(jzu, jupc));  // L x h
}

Array cim_common_surface_gradients(const Model& model, const ModelOutput& out) {
    std::size_t h = model.enc.h;
    if (model.kind == ModelKind::VCBM) {
        // W_d diag(sig'(a)) W_c with a = W_c p_t + b_c; sig'(a) = chat(1-chat).
        std::size_t c = model.C, l = model.L;
        Array g = Array::zeros({l, h});
        for (std::size_t j = 0; j < l; ++j)
            for (std::size_t b = 0; b < h; ++b) {
                double acc = 0.0;
                for (std::size_t a = 0; a < c; ++a) {
                    double sp = out.chat.v[a] * (1.0 - out.chat.v[a]);
                    acc += model.w_d.value.at(j, a) * sp * model.w_c.value.at(a, b);
                }
                g.at(j, b) = acc;
            }
        return g;
    }
    Array jzu = layer_norm_jacobian(out.u, model.ln_gamma.value, kLayerNormEps);
    Array jgpt = gate_jacobian_block(model, out, 0);  // p_t block of W1
    // Through the gate input only: J_{u<-p_t} = diag(p_c) J_{g<-p_t}.
    for (std::size_t a = 0; a < model.enc.h; ++a)
        for (std::size_t b = 0; b < model.enc.h; ++b) jgpt.at(a, b) *= out.p_c.v[a];
    return matprod(model.w_d.value, matprod(jzu, jgpt));
}

namespace {

using GradFn = Array (*)(const Model&, const ModelOutput&);

CimResult cim_generic(Model& model, const PredictionSet& pred, const Dataset& dataset,
                      const TopCMap& topc, bool full_cross_product, GradFn grad_fn,
                      const char* what) {
    std::size_t n = pred.n_samples(), l = pred.n_labels(), c = pred.n_concepts();
    if (topc.per_label.size() != l)
        throw std::invalid_argument(std::string(what) + ": TopC map label mismatch");

    std::unordered_map<std::string, std::size_t> note_of;
    for (std::size_t i = 0; i < dataset.notes.size(); ++i) note_of[dataset.notes[i].id] = i;

    // Candidate (c, j) pairs.
    std::vector<std::pair<std::size_t, std::size_t>> cand;
    if (full_cross_product) {
        for (std::size_t a = 0; a < c; ++a)
            for (std::size_t j = 0; j < l; ++j) cand.emplace_back(a, j);
    } else {
        for (std::size_t j = 0; j < l; ++j)
            for (const TopCEntry& e : topc.per_label[j]) cand.emplace_back(e.concept_index, j);
    }

    std::vector<double> sum(cand.size(), 0.0);
    std::vector<std::size_t> cnt(cand.size(), 0);
    std::vector<bool> label_needed(l, false);
    for (auto& [a, j] : cand) label_needed[j] = true;

    for (std::size_t i = 0; i < n; ++i) {
        // Which pairs does this sample belong to?
        std::vector<std::size_t> hit;
        for (std::size_t p = 0; p < cand.size(); ++p) {
            auto [a, j] = cand[p];
            if (pred.ctilde.at(i, a) > 0.5 && pred.labels.at(i, j) > 0.5) hit.push_back(p);
        }
        if (hit.empty()) continue;
        auto it = note_of.find(pred.ids[i]);
        if (it == note_of.end())
            throw std::runtime_error(std::string(what) + ": note id not in dataset: " +
                                     pred.ids[i]);
        ModelOutput out = model.forward(dataset.notes[it->second]);
        Array grads = grad_fn(model, out);
        std::vector<double> row_norm(l, -1.0);
        for (std::size_t p : hit) {
            std::size_t j = cand[p].second;
            if (row_norm[j] < 0.0) {
                double acc = 0.0;
                for (std::size_t b = 0; b < grads.shape[1]; ++b)
                    acc += grads.at(j, b) * grads.at(j, b);
                row_norm[j] = std::sqrt(acc);
            }
            sum[p] += row_norm[j];
            cnt[p] += 1;
        }
    }

    CimResult res;
    double agg = 0.0;
    for (std::size_t p = 0; p < cand.size(); ++p) {
        if (cnt[p] == 0) continue;
        CimPair pr;
        pr.concept_index = cand[p].first;
        pr.label_index = cand[p].second;
        pr.support = cnt[p];
        pr.value = sum[p] / static_cast<double>(cnt[p]);
        agg += pr.value;
        res.pairs.push_back(pr);
    }
    if (res.pairs.empty())
        throw std::runtime_error(std::string(what) + ": no (concept, label) pair has support");
    res.aggregate = agg / static_cast<double>(res.pairs.size());
    return res;
}

}  // namespace

CimResult cim_head(Model& model, const PredictionSet& pred, const Dataset& dataset,
                   const TopCMap& topc, bool full_cross_product) {
    return cim_generic(model, pred, dataset, topc, full_cross_product, &cim_head_gradients,
                       "cim_head");
}

CimResult cim_common_surface(Model& model, const PredictionSet& pred, const Dataset& dataset,
                             const TopCMap& topc, bool full_cross_product) {
    return cim_generic(model, pred, dataset, topc, full_cross_product,
                       &cim_common_surface_gradients, "cim_common_surface");
}

CcrResult ccr(const PredictionSet& pred, const TopCMap& topc) {
    std::size_t n = pred.n_samples(), l = pred.n_labels();
    if (topc.per_label.size() != l) throw std::invalid_argument("ccr: TopC map label mismatch");
    CcrResult res;
    double agg = 0.0;
    for (std::size_t j = 0; j < l; ++j) {
        for (const TopCEntry& e : topc.per_label[j]) {
            std::size_t num = 0, den = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (pred.ctilde.at(i, e.concept_index) < 0.5) continue;
                if (pred.labels.at(i, j) < 0.5) continue;
                ++den;
                if (pred.decisions.at(i, j) > 0.5) ++num;
            }
            if (den == 0) continue;
            CcrPair pr;
            pr.concept_index = e.concept_index;
            pr.label_index = j;
            pr.support = den;
            pr.value = static_cast<double>(num) / static_cast<double>(den);
            agg += pr.value;
            res.pairs.push_back(pr);
        }
    }
    if (res.pairs.empty()) throw std::runtime_error("ccr: no (label, concept) pair has support");
    res.aggregate = agg / static_cast<double>(res.pairs.size());
    return res;
}

std::vector<std::pair<std::size_t, std::size_t>> match_phrase_token_spans(
    const Note& note, const std::string& phrase) {
    auto lower = [](std::string s) {
        for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        return s;
    };
    std::string text = lower(note.text);
    std::string needle = lower(phrase);
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    if (needle.empty()) return spans;

    auto alnum = [&](std::size_t pos) {
        return pos < text.size() &&
               std::isalnum(static_cast<unsigned char>(text[pos])) != 0;
    };

    std::size_t from = 0;
    while (true) {
        std::size_t pos = text.find(needle, from);
        if (pos == std::string::npos) break;
        from = pos + 1;
        // Whole-word boundaries on both sides.
        if (pos > 0 && alnum(pos - 1)) continue;
        if (alnum(pos + needle.size())) continue;
        // Map the character span to a token index span via token offsets.
        std::size_t begin = note.tokens.size(), end = 0;
        for (std::size_t t = 0; t < note.tokens.size(); ++t) {
            const Token& tok = note.tokens[t];
            if (tok.char_end <= pos || tok.char_start >= pos + needle.size()) continue;
            begin = std::min(begin, t);
            end = std::max(end, t + 1);
        }
        if (begin < end) spans.emplace_back(begin, end);
    }
    return spans;
}

InterventionSummary mask_intervention(Model& model, const PredictionSet& pred,
                                      const Dataset& dataset, const TopCMap& topc,
                                      std::size_t n_pairs, std::uint64_t seed,
                                      std::size_t bootstrap_b) {
    std::size_t n = pred.n_samples(), l = pred.n_labels();
    if (topc.per_label.size() != l)
        throw std::invalid_argument("mask_intervention: TopC map label mismatch");

    std::unordered_map<std::string, std::size_t> note_of;
    for (std::size_t i = 0; i < dataset.notes.size(); ++i) note_of[dataset.notes[i].id] = i;

    // All true positives at tau.
    std::vector<std::pair<std::size_t, std::size_t>> pool;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < l; ++j)
            if (pred.labels.at(i, j) > 0.5 && pred.decisions.at(i, j) > 0.5)
                pool.emplace_back(i, j);
    Rng rng(mix_seed(seed, 0x1A7Eu));
    rng.shuffle(pool);
    if (pool.size() > n_pairs) pool.resize(n_pairs);

    InterventionSummary summary;
    std::vector<double> differences;
    for (auto [i, j] : pool) {
        auto it = note_of.find(pred.ids[i]);
        if (it == note_of.end())
            throw std::runtime_error("mask_intervention: note id not in dataset: " + pred.ids[i]);
        const Note& note = dataset.notes[it->second];

        InterventionRecord rec;
        rec.note_id = note.id;
        rec.row = i;
        rec.label = j;
        for (const TopCEntry& e : topc.per_label[j]) {
            auto spans = match_phrase_token_spans(note, model.concepts.names[e.concept_index]);
            rec.masked_spans.insert(rec.masked_spans.end(), spans.begin(), spans.end());
        }
        rec.valid = !rec.masked_spans.empty();

        std::vector<int> ids = model.encode_note(note);
        ModelOutput before = model.forward_ids(ids);
        rec.p_before = before.probs.v[j];

        if (rec.valid) {
            std::vector<int> masked = ids;
            for (auto [b, e] : rec.masked_spans)
                for (std::size_t t = b; t < e; ++t)
                    if (t + 1 < masked.size()) masked[t + 1] = TokenVocab::kMask;  // CLS at 0
            ModelOutput after = model.forward_ids(masked);
            rec.p_after = after.probs.v[j];
            rec.target_drop = rec.p_before - rec.p_after;
            double csum = 0.0;
            std::size_t ccount = 0;
            for (std::size_t j2 = 0; j2 < l; ++j2) {
                if (j2 == j || pred.labels.at(i, j2) < 0.5) continue;
                csum += before.probs.v[j2] - after.probs.v[j2];
                ++ccount;
            }
            rec.control_drop = ccount == 0 ? 0.0 : csum / static_cast<double>(ccount);

            summary.n_valid += 1;
            summary.mean_target_drop += rec.target_drop;
            summary.mean_control_drop += rec.control_drop;
            differences.push_back(rec.target_drop - rec.control_drop);
            if (rec.target_drop > rec.control_drop) summary.wins += 1;
            else if (rec.target_drop == rec.control_drop) summary.ties += 1;
        } else {
            rec.p_after = rec.p_before;
        }
        summary.records.push_back(std::move(rec));
    }

    if (summary.n_valid == 0)
        throw std::runtime_error("mask_intervention: zero valid pairs (no TopC token matched)");
    double nv = static_cast<double>(summary.n_valid);
    summary.mean_target_drop /= nv;
    summary.mean_control_drop /= nv;
    summary.mean_difference = summary.mean_target_drop - summary.mean_control_drop;
    summary.difference_ci = bootstrap_ci(
        differences,
        [](const std::vector<double>& v) {
            return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
        },
        bootstrap_b, seed);
    // Standard sign-test convention: tied pairs carry no directional
    // information and are excluded from the trials.
    std::size_t trials = summary.n_valid - summary.ties;
    summary.sign_test_p = trials == 0 ? 1.0 : sign_test(summary.wins, trials);
    return summary;
}

}  // namespace mcb
