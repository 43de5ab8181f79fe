#include "mcblab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mcb {

AdamW::AdamW(std::vector<Parameter*> params, AdamWHyper hyper)
    : params_(std::move(params)), hyper_(hyper) {
    if (hyper_.total_steps == 0) throw std::invalid_argument("AdamW: total_steps must be positive");
    warmup_steps_ = static_cast<std::size_t>(std::llround(hyper_.warmup_fraction *
                                                          static_cast<double>(hyper_.total_steps)));
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter* p : params_) {
        m_.push_back(Array::zeros(p->value.shape));
        v_.push_back(Array::zeros(p->value.shape));
    }
}

double AdamW::lr_at(std::size_t step) const {
    double total = static_cast<double>(hyper_.total_steps);
    double warm = static_cast<double>(warmup_steps_);
    double factor;
    if (warmup_steps_ == 0) {
        factor = (total - static_cast<double>(step)) / total;
    } else if (static_cast<double>(step) <= warm) {
        factor = static_cast<double>(step) / warm;
    } else {
        factor = (total - static_cast<double>(step)) / (total - warm);
    }
    if (factor < 0.0) factor = 0.0;
    return hyper_.lr * factor;
}

void AdamW::step() {
    ++step_;
    double lr = lr_at(step_);
    double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Parameter& p = *params_[k];
        Array& m = m_[k];
        Array& v = v_[k];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            double gr = p.grad.v[i];
            m.v[i] = hyper_.beta1 * m.v[i] + (1.0 - hyper_.beta1) * gr;
            v.v[i] = hyper_.beta2 * v.v[i] + (1.0 - hyper_.beta2) * gr * gr;
            double mhat = m.v[i] / bc1;
            double vhat = v.v[i] / bc2;
            p.value.v[i] -= lr * (mhat / (std::sqrt(vhat) + hyper_.eps) +
                                  hyper_.weight_decay * p.value.v[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

}  // namespace mcb
