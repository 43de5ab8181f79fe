#include "mcblab/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mcb {

void gemm(const Array& a, bool ta, const Array& b, bool tb, Array& c, bool accumulate) {
    std::size_t m = ta ? a.shape[1] : a.shape[0];
    std::size_t k = ta ? a.shape[0] : a.shape[1];
    std::size_t kb = tb ? b.shape[1] : b.shape[0];
    std::size_t n = tb ? b.shape[0] : b.shape[1];
    if (k != kb) throw std::invalid_argument("gemm: inner dimension mismatch " + a.shape_str() + " x " + b.shape_str());
    if (c.shape.size() != 2 || c.shape[0] != m || c.shape[1] != n) {
        c = Array({m, n});
    } else if (!accumulate) {
        c.fill(0.0);
    }
    if (!ta && !tb) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = &a.v[i * k];
            double* ci = &c.v[i * n];
            for (std::size_t p = 0; p < k; ++p) {
                double av = ai[p];
                const double* bp = &b.v[p * n];
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else if (!ta && tb) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = &a.v[i * k];
            double* ci = &c.v[i * n];
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = &b.v[j * k];
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
                ci[j] += s;
            }
        }
    } else if (ta && !tb) {
        for (std::size_t p = 0; p < k; ++p) {
            const double* ap = &a.v[p * m];
            const double* bp = &b.v[p * n];
            for (std::size_t i = 0; i < m; ++i) {
                double av = ap[i];
                double* ci = &c.v[i * n];
                for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = &c.v[i * n];
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = &b.v[j * k];
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += a.v[p * m + i] * bj[p];
                ci[j] += s;
            }
        }
    }
}

Tape::Var Tape::emit(Array val, bool needs_grad, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(val);
    if (needs_grad) n.grad = Array::zeros(n.val.shape);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<Var>(nodes_.size() - 1);
}

Tape::Var Tape::constant(Array a) { return emit(std::move(a), false); }

Tape::Var Tape::input(Array a) { return emit(std::move(a), true); }

Tape::Var Tape::param(Parameter& p) {
    Var x = emit(p.value, true);
    nodes_[x].sink = &p;
    return x;
}

Tape::Var Tape::matmul(Var a, Var b, bool ta, bool tb) {
    Array out;
    gemm(value(a), ta, value(b), tb, out, false);
    bool ng = wants(a) || wants(b);
    Var out_var = emit(std::move(out), ng);
    if (ng) {
        nodes_[out_var].back = [a, b, ta, tb, out_var](Tape& t) {
            const Array& gc = t.nodes_[out_var].grad;
            const Array& av = t.value(a);
            const Array& bv = t.value(b);
            if (t.wants(a)) {
                Array& ga = t.g(a);
                if (!ta && !tb) gemm(gc, false, bv, true, ga, true);
                else if (!ta && tb) gemm(gc, false, bv, false, ga, true);
                else if (ta && !tb) gemm(bv, false, gc, true, ga, true);
                else gemm(bv, true, gc, true, ga, true);
            }
            if (t.wants(b)) {
                Array& gb = t.g(b);
                if (!ta && !tb) gemm(av, true, gc, false, gb, true);
                else if (!ta && tb) gemm(gc, true, av, false, gb, true);
                else if (ta && !tb) gemm(av, false, gc, false, gb, true);
                else gemm(gc, true, av, true, gb, true);
            }
        };
    }
    return out_var;
}

Tape::Var Tape::matvec(Var w, Var x) {
    const Array& wv = value(w);
    const Array& xv = value(x);
    if (wv.rank() != 2 || xv.rank() != 1 || wv.shape[1] != xv.shape[0])
        throw std::invalid_argument("matvec: shape mismatch " + wv.shape_str() + " * " + xv.shape_str());
    std::size_t m = wv.shape[0], n = wv.shape[1];
    Array out({m});
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        const double* wi = &wv.v[i * n];
        for (std::size_t j = 0; j < n; ++j) s += wi[j] * xv.v[j];
        out.v[i] = s;
    }
    bool ng = wants(w) || wants(x);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [w, x, o, m, n](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            const Array& wv2 = t.value(w);
            const Array& xv2 = t.value(x);
            if (t.wants(w)) {
                Array& gw = t.g(w);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gw.v[i * n + j] += gc.v[i] * xv2.v[j];
            }
            if (t.wants(x)) {
                Array& gx = t.g(x);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gx.v[j] += gc.v[i] * wv2.v[i * n + j];
            }
        };
    }
    return o;
}

Tape::Var Tape::add(Var a, Var b) {
    const Array& av = value(a);
    const Array& bv = value(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
    Array out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] += bv.v[i];
    bool ng = wants(a) || wants(b);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, b, o](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            if (t.wants(a)) {
                Array& ga = t.g(a);
                for (std::size_t i = 0; i < gc.size(); ++i) ga.v[i] += gc.v[i];
            }
            if (t.wants(b)) {
                Array& gb = t.g(b);
                for (std::size_t i = 0; i < gc.size(); ++i) gb.v[i] += gc.v[i];
            }
        };
    }
    return o;
}

Tape::Var Tape::scale(Var a, double c) {
    Array out = value(a);
    for (double& x : out.v) x *= c;
    bool ng = wants(a);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, c, o](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            Array& ga = t.g(a);
            for (std::size_t i = 0; i < gc.size(); ++i) ga.v[i] += c * gc.v[i];
        };
    }
    return o;
}

Tape::Var Tape::add_rowvec(Var m, Var vv) {
    const Array& mv = value(m);
    const Array& bv = value(vv);
    if (mv.rank() != 2 || bv.rank() != 1 || mv.shape[1] != bv.shape[0])
        throw std::invalid_argument("add_rowvec: shape mismatch");
    Array out = mv;
    std::size_t r = mv.shape[0], c = mv.shape[1];
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.v[i * c + j] += bv.v[j];
    bool ng = wants(m) || wants(vv);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [m, vv, o, r, c](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            if (t.wants(m)) {
                Array& gm = t.g(m);
                for (std::size_t i = 0; i < gc.size(); ++i) gm.v[i] += gc.v[i];
            }
            if (t.wants(vv)) {
                Array& gb = t.g(vv);
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) gb.v[j] += gc.v[i * c + j];
            }
        };
    }
    return o;
}

Tape::Var Tape::mul(Var a, Var b) {
    const Array& av = value(a);
    const Array& bv = value(b);
    if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
    Array out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out.v[i] *= bv.v[i];
    bool ng = wants(a) || wants(b);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, b, o](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            const Array& av2 = t.value(a);
            const Array& bv2 = t.value(b);
            if (t.wants(a)) {
                Array& ga = t.g(a);
                for (std::size_t i = 0; i < gc.size(); ++i) ga.v[i] += gc.v[i] * bv2.v[i];
            }
            if (t.wants(b)) {
                Array& gb = t.g(b);
                for (std::size_t i = 0; i < gc.size(); ++i) gb.v[i] += gc.v[i] * av2.v[i];
            }
        };
    }
    return o;
}

Tape::Var Tape::relu(Var a) {
    Array out = value(a);
    for (double& x : out.v) x = x > 0.0 ? x : 0.0;
    bool ng = wants(a);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, o](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            const Array& av = t.value(a);
            Array& ga = t.g(a);
            for (std::size_t i = 0; i < gc.size(); ++i)
                if (av.v[i] > 0.0) ga.v[i] += gc.v[i];
        };
    }
    return o;
}

Tape::Var Tape::sigmoid(Var a) {
    Array out = value(a);
    for (double& x : out.v) x = 1.0 / (1.0 + std::exp(-x));
    bool ng = wants(a);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, o](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            const Array& y = t.nodes_[o].val;
            Array& ga = t.g(a);
            for (std::size_t i = 0; i < gc.size(); ++i) ga.v[i] += gc.v[i] * y.v[i] * (1.0 - y.v[i]);
        };
    }
    return o;
}

Tape::Var Tape::softmax_rows(Var a) {
    const Array& av = value(a);
    Array out = av;
    std::size_t r = av.shape[0], c = av.shape[1];
    for (std::size_t i = 0; i < r; ++i) {
        double mx = out.v[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, out.v[i * c + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            out.v[i * c + j] = std::exp(out.v[i * c + j] - mx);
            s += out.v[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) out.v[i * c + j] /= s;
    }
    bool ng = wants(a);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, o, r, c](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            const Array& y = t.nodes_[o].val;
            Array& ga = t.g(a);
            for (std::size_t i = 0; i < r; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) dot += gc.v[i * c + j] * y.v[i * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    ga.v[i * c + j] += y.v[i * c + j] * (gc.v[i * c + j] - dot);
            }
        };
    }
    return o;
}

Tape::Var Tape::slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Array& av = value(a);
    std::size_t r = av.shape[0], c = av.shape[1], w = c1 - c0;
    Array out({r, w});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) out.v[i * w + j] = av.v[i * c + c0 + j];
    bool ng = wants(a);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, o, r, c, c0, w](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            Array& ga = t.g(a);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < w; ++j) ga.v[i * c + c0 + j] += gc.v[i * w + j];
        };
    }
    return o;
}

Tape::Var Tape::concat_cols(const std::vector<Var>& parts) {
    std::size_t r = value(parts[0]).shape[0];
    std::size_t total = 0;
    bool ng = false;
    for (Var p : parts) {
        total += value(p).shape[1];
        ng = ng || wants(p);
    }
    Array out({r, total});
    std::size_t off = 0;
    for (Var p : parts) {
        const Array& pv = value(p);
        std::size_t w = pv.shape[1];
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) out.v[i * total + off + j] = pv.v[i * w + j];
        off += w;
    }
    Var o = emit(std::move(out), ng);
    if (ng) {
        std::vector<Var> ps = parts;
        nodes_[o].back = [ps, o, r, total](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            std::size_t off2 = 0;
            for (Var p : ps) {
                std::size_t w = t.value(p).shape[1];
                if (t.wants(p)) {
                    Array& gp = t.g(p);
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < w; ++j) gp.v[i * w + j] += gc.v[i * total + off2 + j];
                }
                off2 += w;
            }
        };
    }
    return o;
}

Tape::Var Tape::concat_vec(Var a, Var b) {
    const Array& av = value(a);
    const Array& bv = value(b);
    std::size_t na = av.size(), nb = bv.size();
    Array out({na + nb});
    std::copy(av.v.begin(), av.v.end(), out.v.begin());
    std::copy(bv.v.begin(), bv.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(na));
    bool ng = wants(a) || wants(b);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, b, o, na, nb](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            if (t.wants(a)) {
                Array& ga = t.g(a);
                for (std::size_t i = 0; i < na; ++i) ga.v[i] += gc.v[i];
            }
            if (t.wants(b)) {
                Array& gb = t.g(b);
                for (std::size_t i = 0; i < nb; ++i) gb.v[i] += gc.v[na + i];
            }
        };
    }
    return o;
}

Tape::Var Tape::row(Var m, std::size_t i) {
    const Array& mv = value(m);
    std::size_t c = mv.shape[1];
    Array out({c});
    for (std::size_t j = 0; j < c; ++j) out.v[j] = mv.v[i * c + j];
    bool ng = wants(m);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [m, o, i, c](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            Array& gm = t.g(m);
            for (std::size_t j = 0; j < c; ++j) gm.v[i * c + j] += gc.v[j];
        };
    }
    return o;
}

Tape::Var Tape::mean_rows(Var m) {
    const Array& mv = value(m);
    std::size_t r = mv.shape[0], c = mv.shape[1];
    Array out({c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.v[j] += mv.v[i * c + j];
    for (std::size_t j = 0; j < c; ++j) out.v[j] /= static_cast<double>(r);
    bool ng = wants(m);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [m, o, r, c](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            Array& gm = t.g(m);
            double inv = 1.0 / static_cast<double>(r);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gm.v[i * c + j] += gc.v[j] * inv;
        };
    }
    return o;
}

Tape::Var Tape::layer_norm_rows(Var m, Var gamma, Var beta, double eps) {
    const Array& mv = value(m);
    bool vec_in = mv.rank() == 1;
    std::size_t r = vec_in ? 1 : mv.shape[0];
    std::size_t h = vec_in ? mv.shape[0] : mv.shape[1];
    const Array& gv = value(gamma);
    const Array& bv = value(beta);
    if (gv.size() != h || bv.size() != h) throw std::invalid_argument("layer_norm: gamma/beta shape mismatch");
    Array out = mv;
    Array fcache({r, h});   // standardized residual per row
    Array scache({r});      // sqrt(var + eps) per row
    for (std::size_t i = 0; i < r; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < h; ++j) mean += mv.v[i * h + j];
        mean /= static_cast<double>(h);
        double var = 0.0;
        for (std::size_t j = 0; j < h; ++j) {
            double d = mv.v[i * h + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(h);
        double s = std::sqrt(var + eps);
        scache.v[i] = s;
        for (std::size_t j = 0; j < h; ++j) {
            double f = (mv.v[i * h + j] - mean) / s;
            fcache.v[i * h + j] = f;
            out.v[i * h + j] = gv.v[j] * f + bv.v[j];
        }
    }
    bool ng = wants(m) || wants(gamma) || wants(beta);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [m, gamma, beta, o, r, h, fcache, scache](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            const Array& gv2 = t.value(gamma);
            for (std::size_t i = 0; i < r; ++i) {
                if (t.wants(beta)) {
                    Array& gb = t.g(beta);
                    for (std::size_t j = 0; j < h; ++j) gb.v[j] += gc.v[i * h + j];
                }
                if (t.wants(gamma)) {
                    Array& gg = t.g(gamma);
                    for (std::size_t j = 0; j < h; ++j) gg.v[j] += gc.v[i * h + j] * fcache.v[i * h + j];
                }
                if (t.wants(m)) {
                    Array& gm = t.g(m);
                    double gf_mean = 0.0, gff_mean = 0.0;
                    for (std::size_t j = 0; j < h; ++j) {
                        double gf = gc.v[i * h + j] * gv2.v[j];
                        gf_mean += gf;
                        gff_mean += gf * fcache.v[i * h + j];
                    }
                    gf_mean /= static_cast<double>(h);
                    gff_mean /= static_cast<double>(h);
                    double inv_s = 1.0 / scache.v[i];
                    for (std::size_t j = 0; j < h; ++j) {
                        double gf = gc.v[i * h + j] * gv2.v[j];
                        gm.v[i * h + j] += inv_s * (gf - gf_mean - fcache.v[i * h + j] * gff_mean);
                    }
                }
            }
        };
    }
    return o;
}

Tape::Var Tape::embedding(Var table, const std::vector<int>& ids) {
    const Array& tv = value(table);
    std::size_t h = tv.shape[1];
    std::size_t n = ids.size();
    Array out({n, h});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) out.v[i * h + j] = tv.v[static_cast<std::size_t>(ids[i]) * h + j];
    bool ng = wants(table);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [table, o, ids, n, h](Tape& t) {
            const Array& gc = t.nodes_[o].grad;
            Array& gt = t.g(table);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < h; ++j)
                    gt.v[static_cast<std::size_t>(ids[i]) * h + j] += gc.v[i * h + j];
        };
    }
    return o;
}

Tape::Var Tape::mean_all(Var a) {
    const Array& av = value(a);
    double s = 0.0;
    for (double x : av.v) s += x;
    std::size_t n = av.size();
    Array out = Array::scalar(s / static_cast<double>(n));
    bool ng = wants(a);
    Var o = emit(std::move(out), ng);
    if (ng) {
        nodes_[o].back = [a, o, n](Tape& t) {
            double gs = t.nodes_[o].grad.v[0] / static_cast<double>(n);
            Array& ga = t.g(a);
            for (double& x : ga.v) x += gs;
        };
    }
    return o;
}

namespace {
double log_sigmoid(double x) {
    // log(sigma(x)) computed without overflow on either tail.
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}
}  // namespace

Tape::Var Tape::focal_loss(Var logits, const std::vector<double>& targets, double gamma, double alpha) {
    const Array& lv = value(logits);
    std::size_t L = lv.size();
    if (targets.size() != L) throw std::invalid_argument("focal_loss: target length mismatch");
    for (double t : targets)
        if (t != 0.0 && t != 1.0) throw std::invalid_argument("focal_loss: targets must be binary");
    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        double ell = lv.v[i];
        double p = 1.0 / (1.0 + std::exp(-ell));
        if (targets[i] == 1.0) {
            total += -alpha * std::pow(1.0 - p, gamma) * log_sigmoid(ell);
        } else {
            total += -(1.0 - alpha) * std::pow(p, gamma) * log_sigmoid(-ell);
        }
    }
    Array out = Array::scalar(total / static_cast<double>(L));
    bool ng = wants(logits);
    Var o = emit(std::move(out), ng);
    if (ng) {
        std::vector<double> ts = targets;
        nodes_[o].back = [logits, o, ts, gamma, alpha, L](Tape& t) {
            double gs = t.nodes_[o].grad.v[0] / static_cast<double>(L);
            const Array& lv2 = t.value(logits);
            Array& gl = t.g(logits);
            for (std::size_t i = 0; i < L; ++i) {
                double ell = lv2.v[i];
                double p = 1.0 / (1.0 + std::exp(-ell));
                double d;
                if (ts[i] == 1.0) {
                    d = alpha * (gamma * p * std::pow(1.0 - p, gamma) * log_sigmoid(ell) -
                                 std::pow(1.0 - p, gamma + 1.0));
                } else {
                    d = (1.0 - alpha) * (std::pow(p, gamma + 1.0) -
                                         gamma * (1.0 - p) * std::pow(p, gamma) * log_sigmoid(-ell));
                }
                gl.v[i] += gs * d;
            }
        };
    }
    return o;
}

Tape::Var Tape::bce_loss(Var activations, const std::vector<double>& targets) {
    const Array& av = value(activations);
    std::size_t C = av.size();
    if (targets.size() != C) throw std::invalid_argument("bce_loss: target length mismatch");
    for (double t : targets)
        if (t != 0.0 && t != 1.0) throw std::invalid_argument("bce_loss: targets must be binary");
    constexpr double kClamp = 1e-12;
    double total = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
        double a = std::clamp(av.v[i], kClamp, 1.0 - kClamp);
        total += -(targets[i] * std::log(a) + (1.0 - targets[i]) * std::log(1.0 - a));
    }
    Array out = Array::scalar(total / static_cast<double>(C));
    bool ng = wants(activations);
    Var o = emit(std::move(out), ng);
    if (ng) {
        std::vector<double> ts = targets;
        nodes_[o].back = [activations, o, ts, C](Tape& t) {
            double gs = t.nodes_[o].grad.v[0] / static_cast<double>(C);
            const Array& av2 = t.value(activations);
            Array& ga = t.g(activations);
            for (std::size_t i = 0; i < C; ++i) {
                double a = av2.v[i];
                if (a <= kClamp || a >= 1.0 - kClamp) continue;  // flat in clamped region
                ga.v[i] += gs * (-ts[i] / a + (1.0 - ts[i]) / (1.0 - a));
            }
        };
    }
    return o;
}

Tape::Var Tape::cosine_align_loss(Var a, Var b) {
    const Array& av = value(a);
    const Array& bv = value(b);
    if (av.size() != bv.size()) throw std::invalid_argument("cosine_align_loss: length mismatch");
    constexpr double kEps = 1e-8;
    std::size_t n = av.size();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += av.v[i] * bv.v[i];
        na2 += av.v[i] * av.v[i];
        nb2 += bv.v[i] * bv.v[i];
    }
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    double denom = na * nb + kEps;
    double loss = 1.0 - dot / denom;
    bool ng = wants(a) || wants(b);
    Var o = emit(Array::scalar(loss), ng);
    if (ng) {
        nodes_[o].back = [a, b, o, n, dot, na, nb, denom](Tape& t) {
            double gs = t.nodes_[o].grad.v[0];
            const Array& av2 = t.value(a);
            const Array& bv2 = t.value(b);
            // d(1 - dot/denom)/da_i = -(b_i/denom) + dot * nb * (a_i/na) / denom^2
            if (t.wants(a)) {
                Array& ga = t.g(a);
                for (std::size_t i = 0; i < n; ++i) {
                    double d = -bv2.v[i] / denom;
                    if (na > 0.0) d += dot * nb * (av2.v[i] / na) / (denom * denom);
                    ga.v[i] += gs * d;
                }
            }
            if (t.wants(b)) {
                Array& gb = t.g(b);
                for (std::size_t i = 0; i < n; ++i) {
                    double d = -av2.v[i] / denom;
                    if (nb > 0.0) d += dot * na * (bv2.v[i] / nb) / (denom * denom);
                    gb.v[i] += gs * d;
                }
            }
        };
    }
    return o;
}

Tape::Var Tape::weighted_sum(const std::vector<Var>& scalars, const std::vector<double>& weights) {
    if (scalars.size() != weights.size()) throw std::invalid_argument("weighted_sum: length mismatch");
    double total = 0.0;
    bool ng = false;
    for (std::size_t i = 0; i < scalars.size(); ++i) {
        total += weights[i] * value(scalars[i]).v[0];
        ng = ng || wants(scalars[i]);
    }
    Var o = emit(Array::scalar(total), ng);
    if (ng) {
        std::vector<Var> ss = scalars;
        std::vector<double> ws = weights;
        nodes_[o].back = [ss, ws, o](Tape& t) {
            double gs = t.nodes_[o].grad.v[0];
            for (std::size_t i = 0; i < ss.size(); ++i)
                if (t.wants(ss[i])) t.g(ss[i]).v[0] += gs * ws[i];
        };
    }
    return o;
}

void Tape::backward(Var scalar_output, double seed) {
    if (value(scalar_output).size() != 1)
        throw std::invalid_argument("backward: output must be a scalar");
    if (!wants(scalar_output)) return;
    g(scalar_output).v[0] = seed;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (nodes_[i].back) nodes_[i].back(*this);
    }
    for (Node& n : nodes_) {
        if (n.sink) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) n.sink->grad.v[i] += n.grad.v[i];
        }
    }
}

}  // namespace mcb
