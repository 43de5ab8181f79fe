#include "mcblab/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mcb {

using json = nlohmann::ordered_json;

void PredictionSet::init(std::size_t n, std::size_t l, std::size_t c) {
    ids.assign(n, std::string{});
    scores = Array::zeros({n, l});
    decisions = Array::zeros({n, l});
    labels = Array::zeros({n, l});
    chat = Array::zeros({n, c});
    ctilde = Array::zeros({n, c});
}

void PredictionSet::threshold() {
    for (std::size_t i = 0; i < scores.v.size(); ++i)
        decisions.v[i] = scores.v[i] > tau ? 1.0 : 0.0;
}

namespace {

void check_shapes(const PredictionSet& p) {
    if (p.scores.shape != p.decisions.shape || p.scores.shape != p.labels.shape)
        throw std::invalid_argument("PredictionSet: scores/decisions/labels shape mismatch");
    if (p.scores.shape[0] == 0) throw std::invalid_argument("PredictionSet: empty (N = 0)");
    if (p.ids.size() != p.scores.shape[0])
        throw std::invalid_argument("PredictionSet: ids size mismatch");
}

struct Counts {
    double tp = 0, fp = 0, fn = 0;
};

std::vector<Counts> count_per_label(const PredictionSet& p) {
    std::size_t n = p.n_samples(), l = p.n_labels();
    std::vector<Counts> c(l);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < l; ++j) {
            bool d = p.decisions.at(i, j) > 0.5;
            bool y = p.labels.at(i, j) > 0.5;
            if (d && y) c[j].tp += 1;
            else if (d && !y) c[j].fp += 1;
            else if (!d && y) c[j].fn += 1;
        }
    }
    return c;
}

double safe_div(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

}  // namespace

F1Result f1_scores(const PredictionSet& pred) {
    check_shapes(pred);
    auto counts = count_per_label(pred);
    F1Result r;
    double tp = 0, fp = 0, fn = 0;
    for (const Counts& c : counts) {
        r.per_label.push_back(safe_div(2 * c.tp, 2 * c.tp + c.fp + c.fn));
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
    }
    r.macro = std::accumulate(r.per_label.begin(), r.per_label.end(), 0.0) /
              static_cast<double>(r.per_label.size());
    r.micro = safe_div(2 * tp, 2 * tp + fp + fn);
    return r;
}

PrecisionRecall precision_recall_decomposition(const PredictionSet& pred) {
    check_shapes(pred);
    auto counts = count_per_label(pred);
    PrecisionRecall r;
    double tp = 0, fp = 0, fn = 0;
    for (const Counts& c : counts) {
        r.macro_p += safe_div(c.tp, c.tp + c.fp);
        r.macro_r += safe_div(c.tp, c.tp + c.fn);
        tp += c.tp;
        fp += c.fp;
        fn += c.fn;
    }
    double l = static_cast<double>(counts.size());
    r.macro_p /= l;
    r.macro_r /= l;
    r.micro_p = safe_div(tp, tp + fp);
    r.micro_r = safe_div(tp, tp + fn);
    return r;
}

namespace {

// Rank-based AUC with midrank tie handling over (score, label) pairs.
// Returns AUC, or -1 if the pairs lack a positive or a negative.
double rank_auc(const std::vector<double>& scores, const std::vector<bool>& pos) {
    std::size_t n = scores.size();
    std::size_t npos = 0;
    for (bool b : pos) npos += b ? 1 : 0;
    std::size_t nneg = n - npos;
    if (npos == 0 || nneg == 0) return -1.0;

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Midranks: equal scores share the mean of their 1-based rank range.
    std::vector<double> rank(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) rank[order[k]] = mid;
        i = j;
    }
    double rank_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (pos[k]) rank_sum += rank[k];
    double np = static_cast<double>(npos), nn = static_cast<double>(nneg);
    return (rank_sum - np * (np + 1) / 2.0) / (np * nn);
}

}  // namespace

AucResult auc_scores(const PredictionSet& pred) {
    check_shapes(pred);
    std::size_t n = pred.n_samples(), l = pred.n_labels();
    AucResult r;
    double sum = 0.0;
    std::size_t valid = 0;
    for (std::size_t j = 0; j < l; ++j) {
        std::vector<double> s(n);
        std::vector<bool> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = pred.scores.at(i, j);
            y[i] = pred.labels.at(i, j) > 0.5;
        }
        double a = rank_auc(s, y);
        if (a < 0.0) {
            r.skipped_labels.push_back(j);
        } else {
            sum += a;
            ++valid;
        }
    }
    if (valid == 0) throw std::runtime_error("auc_scores: no label has both classes");
    r.macro = sum / static_cast<double>(valid);

    std::vector<double> flat_s(n * l);
    std::vector<bool> flat_y(n * l);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < l; ++j) {
            flat_s[i * l + j] = pred.scores.at(i, j);
            flat_y[i * l + j] = pred.labels.at(i, j) > 0.5;
        }
    double micro = rank_auc(flat_s, flat_y);
    r.micro = micro < 0.0 ? 0.5 : micro;
    return r;
}

std::vector<TopKResult> topk_metrics(const PredictionSet& pred,
                                     const std::vector<std::size_t>& ks) {
    check_shapes(pred);
    std::size_t n = pred.n_samples(), l = pred.n_labels();
    for (std::size_t k : ks)
        if (k == 0 || k > l)
            throw std::invalid_argument("topk_metrics: K must be in [1, L], got " +
                                        std::to_string(k));

    std::vector<TopKResult> out;
    for (std::size_t k : ks) {
        double psum = 0.0, rsum = 0.0;
        std::size_t rcount = 0;
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<std::size_t> order(l);
            std::iota(order.begin(), order.end(), 0);
            // Descending score; ties broken by lower label index (stable sort
            // keeps index order within equal scores).
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return pred.scores.at(i, a) > pred.scores.at(i, b);
            });
            std::size_t hits = 0, truth = 0;
            for (std::size_t j = 0; j < l; ++j)
                truth += pred.labels.at(i, j) > 0.5 ? 1 : 0;
            for (std::size_t r = 0; r < k; ++r)
                hits += pred.labels.at(i, order[r]) > 0.5 ? 1 : 0;
            psum += static_cast<double>(hits) / static_cast<double>(k);
            if (truth > 0) {
                rsum += static_cast<double>(hits) / static_cast<double>(truth);
                ++rcount;
            }
        }
        TopKResult t;
        t.k = k;
        t.precision = psum / static_cast<double>(n);
        t.recall = rcount == 0 ? 0.0 : rsum / static_cast<double>(rcount);
        t.recall_samples = rcount;
        out.push_back(t);
    }
    return out;
}

std::vector<std::size_t> default_bin_sizes(std::size_t n_labels) {
    // Same 16:16:18 proportions as the full label space, scaled down.
    std::size_t head = (n_labels * 16 + 25) / 50;
    std::size_t mid = (n_labels * 16 + 25) / 50;
    if (head == 0) head = 1;
    if (mid == 0 && n_labels >= 2) mid = 1;
    while (head + mid >= n_labels && mid > 0) --mid;
    while (head + mid >= n_labels && head > 1) --head;
    std::size_t tail = n_labels - head - mid;
    return {head, mid, tail};
}

std::vector<LongtailBin> longtail_binned_f1(const PredictionSet& pred,
                                            const std::vector<std::size_t>& train_label_counts,
                                            const std::vector<std::size_t>& bin_sizes) {
    check_shapes(pred);
    std::size_t l = pred.n_labels();
    if (train_label_counts.size() != l)
        throw std::invalid_argument("longtail_binned_f1: train_label_counts size mismatch");
    std::size_t total = std::accumulate(bin_sizes.begin(), bin_sizes.end(), std::size_t{0});
    if (total != l || bin_sizes.empty())
        throw std::invalid_argument("longtail_binned_f1: bin sizes must sum to L");

    std::vector<std::size_t> order(l);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return train_label_counts[a] > train_label_counts[b];
    });

    F1Result f1 = f1_scores(pred);
    static const char* kNames[] = {"HEAD", "MID", "TAIL"};
    std::vector<LongtailBin> bins;
    std::size_t pos = 0;
    for (std::size_t b = 0; b < bin_sizes.size(); ++b) {
        LongtailBin bin;
        bin.name = b < 3 ? kNames[b] : "BIN" + std::to_string(b);
        double sum = 0.0;
        for (std::size_t r = 0; r < bin_sizes[b]; ++r) {
            std::size_t j = order[pos++];
            bin.label_indices.push_back(j);
            sum += f1.per_label[j];
        }
        bin.macro_f1 = bin_sizes[b] == 0 ? 0.0 : sum / static_cast<double>(bin_sizes[b]);
        bins.push_back(std::move(bin));
    }
    return bins;
}

void PredictionSet::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    json header;
    header["format"] = "prediction-dump";
    header["version"] = 1;
    header["tau"] = tau;
    header["n"] = n_samples();
    header["labels"] = n_labels();
    header["concepts"] = n_concepts();
    out << header.dump() << "\n";
    for (std::size_t i = 0; i < n_samples(); ++i) {
        json rec;
        rec["id"] = ids[i];
        json s = json::array(), d = json::array(), y = json::array();
        for (std::size_t j = 0; j < n_labels(); ++j) {
            s.push_back(scores.at(i, j));
            d.push_back(static_cast<int>(decisions.at(i, j)));
            y.push_back(static_cast<int>(labels.at(i, j)));
        }
        json ch = json::array(), ct = json::array();
        for (std::size_t k = 0; k < n_concepts(); ++k) {
            ch.push_back(chat.at(i, k));
            ct.push_back(static_cast<int>(ctilde.at(i, k)));
        }
        rec["scores"] = std::move(s);
        rec["decisions"] = std::move(d);
        rec["labels"] = std::move(y);
        rec["chat"] = std::move(ch);
        rec["ctilde"] = std::move(ct);
        out << rec.dump() << "\n";
    }
}

PredictionSet PredictionSet::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string line;
    std::size_t lineno = 0;
    PredictionSet p;
    std::size_t n = 0, l = 0, c = 0, row = 0;
    try {
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            json j = json::parse(line);
            if (lineno == 1) {
                if (j.value("format", "") != "prediction-dump")
                    throw std::runtime_error("not a prediction dump");
                n = j.at("n").get<std::size_t>();
                l = j.at("labels").get<std::size_t>();
                c = j.at("concepts").get<std::size_t>();
                p.tau = j.at("tau").get<double>();
                p.init(n, l, c);
                continue;
            }
            if (row >= n) throw std::runtime_error("more records than header n");
            p.ids[row] = j.at("id").get<std::string>();
            const auto& s = j.at("scores");
            const auto& d = j.at("decisions");
            const auto& y = j.at("labels");
            const auto& ch = j.at("chat");
            const auto& ct = j.at("ctilde");
            if (s.size() != l || d.size() != l || y.size() != l || ch.size() != c ||
                ct.size() != c)
                throw std::runtime_error("record width mismatch");
            for (std::size_t jj = 0; jj < l; ++jj) {
                p.scores.at(row, jj) = s[jj].get<double>();
                p.decisions.at(row, jj) = d[jj].get<double>();
                p.labels.at(row, jj) = y[jj].get<double>();
            }
            for (std::size_t k = 0; k < c; ++k) {
                p.chat.at(row, k) = ch[k].get<double>();
                p.ctilde.at(row, k) = ct[k].get<double>();
            }
            ++row;
        }
    } catch (const json::exception& e) {
        throw std::runtime_error("prediction dump parse error at line " +
                                 std::to_string(lineno) + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw std::runtime_error("prediction dump parse error at line " +
                                 std::to_string(lineno) + ": " + e.what());
    }
    if (row != n)
        throw std::runtime_error("prediction dump truncated: expected " + std::to_string(n) +
                                 " records, got " + std::to_string(row));
    return p;
}

}  // namespace mcb
