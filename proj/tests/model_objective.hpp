#pragma once

#include <cmath>
#include <vector>

#include "emolora/numkern.hpp"
#include "emolora/rng.hpp"
#include "emolora/schemes.hpp"
#include "emolora/ttsmodel.hpp"
#include "test_support.hpp"

namespace emolora::testing {

inline ModelConfig small_config() {
    ModelConfig cfg;
    cfg.vocab = 10;
    cfg.hidden = 8;
    cfg.out_dim = 4;
    cfg.flow_layers = 2;
    cfg.kernel = 3;
    cfg.max_duration = 3;
    cfg.pos_channels = 4;
    return cfg;
}

// Objective used by the model-level gradient checks: output mse plus log
// duration mse, on a fixed frame grid.
struct Objective {
    std::vector<int> tokens;
    std::vector<int> frames;
    Tensor target;
    std::vector<float> dur_target;

    double operator()(const ToyModel& m) const {
        const SynthOutput o = m.forward_with_frames(tokens, frames);
        double dur = 0.0;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const double d = std::log(static_cast<double>(o.durations[i])) - std::log(static_cast<double>(dur_target[i]));
            dur += d * d;
        }
        return nk::mse_loss(o.output, target) + dur / static_cast<double>(tokens.size());
    }

    void backward(ToyModel& m) const {
        Trace tr = m.forward_train(tokens, frames);
        std::vector<float> gd(tokens.size());
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            const double d = tr.out.durations[i];
            gd[i] = static_cast<float>(2.0 * (std::log(d) - std::log(static_cast<double>(dur_target[i]))) /
                                       (static_cast<double>(tokens.size()) * d));
        }
        m.backward(tr, nk::mse_grad(tr.out.output, target), gd);
    }
};

inline Objective random_objective(const ToyModel& m, Rng& rng) {
    Objective obj;
    const auto& cfg = m.config();
    const int len = 2 + static_cast<int>(rng.below(3));
    std::size_t total = 0;
    for (int i = 0; i < len; ++i) {
        obj.tokens.push_back(static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg.vocab))));
        obj.frames.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint32_t>(cfg.max_duration))));
        obj.dur_target.push_back(static_cast<float>(rng.uniform(0.8, 3.5)));
        total += static_cast<std::size_t>(obj.frames.back());
    }
    obj.target = random_tensor({total, static_cast<std::size_t>(cfg.out_dim)}, rng);
    return obj;
}

// Rank-2 adapters on every layer with non-zero B and A scaled up from its
// init, so every factor gradient is well above the float32 rounding floor
// of the forward and backward passes.
inline void attach_everywhere(ToyModel& m, Rng& rng) {
    for (auto& [path, l] : m.layers()) {
        const int r = effective_rank(2, l->d_in_eff(), l->d_out_eff());
        l->attach(r, effective_alpha(2.0f, 2, r), rng);
    }
    for (auto& [path, p] : trainable_params(m)) {
        if (path.ends_with(".lora_b")) {
            p->value = random_tensor(p->value.shape(), rng, -0.3, 0.3);
        } else {
            for (float& v : p->value.data()) v *= 20.0f;
        }
    }
}

} // namespace emolora::testing
