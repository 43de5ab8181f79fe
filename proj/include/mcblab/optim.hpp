#pragma once

#include <cstdint>
#include <vector>

#include "mcblab/tape.hpp"

namespace mcb {

struct AdamWHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double warmup_fraction = 0.1;
    std::size_t total_steps = 1;
};

// AdamW with decoupled weight decay and a linear warmup/decay schedule:
// lr(step) = base * min(step / warmup, (total - step) / (total - warmup)),
// clipped to >= 0.
class AdamW {
  public:
    AdamW(std::vector<Parameter*> params, AdamWHyper hyper);

    void step();
    void zero_grad();
    double current_lr() const { return lr_at(step_ + 1); }
    double lr_at(std::size_t step) const;
    std::size_t steps_taken() const { return step_; }

  private:
    std::vector<Parameter*> params_;
    std::vector<Array> m_, v_;
    AdamWHyper hyper_;
    std::size_t step_ = 0;
    std::size_t warmup_steps_ = 0;
};

}  // namespace mcb
