#include "emolora/lora.hpp"

#include <algorithm>
#include <string>

#include "emolora/errors.hpp"
#include "emolora/numkern.hpp"

namespace emolora {

const char* layer_kind_name(LayerKind kind) {
    return kind == LayerKind::linear ? "linear" : "conv1d";
}

AdaptableLayer::AdaptableLayer(LayerKind kind, std::size_t in, std::size_t out, std::size_t kernel)
    : kind_(kind), in_(in), out_(out), kernel_(kernel) {
    if (kind == LayerKind::conv1d && kernel % 2 == 0) {
        throw ConfigError("conv1d kernel size must be odd, got " + std::to_string(kernel));
    }
    if (kind == LayerKind::linear) {
        weight_ = Param(Tensor({out, in}));
    } else {
        weight_ = Param(Tensor({out, in, kernel}));
    }
    bias_ = Param(Tensor({out}));
}

AdaptableLayer AdaptableLayer::linear(std::size_t in, std::size_t out) {
    return AdaptableLayer(LayerKind::linear, in, out, 1);
}

AdaptableLayer AdaptableLayer::conv1d(std::size_t in, std::size_t out, std::size_t kernel) {
    return AdaptableLayer(LayerKind::conv1d, in, out, kernel);
}

Tensor AdaptableLayer::unfold(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != in_) {
        throw ShapeError(std::string(layer_kind_name(kind_)) + " layer expects [T x " + std::to_string(in_) +
                         "] input, got " + x.shape_string());
    }
    return kind_ == LayerKind::linear ? x : nk::im2col(x, kernel_);
}

Tensor AdaptableLayer::fold(const Tensor& cols) const {
    return kind_ == LayerKind::linear ? cols : nk::col2im(cols, in_, kernel_);
}

LoraPair& AdaptableLayer::lora_pair() {
    if (!lora_) throw StateError("layer has no adapter attached");
    return *lora_;
}

Tensor AdaptableLayer::forward(const Tensor& x) const {
    const Tensor cols = unfold(x);
    Tensor h = nk::linear_forward(cols, weight_.value, bias_.value);
    if (lora_ && lora_->enabled && !lora_->merged) {
        const Tensor zero_r({static_cast<std::size_t>(lora_->rank)});
        const Tensor zero_out({out_});
        const Tensor u = nk::linear_forward(cols, lora_->a.value, zero_r);
        const Tensor d = nk::linear_forward(u, lora_->b.value, zero_out);
        const double s = lora_->scale();
        for (std::size_t i = 0; i < h.size(); ++i) {
            h[i] += static_cast<float>(s * static_cast<double>(d[i]));
        }
    }
    return h;
}

Tensor AdaptableLayer::backward(const Tensor& x, const Tensor& grad_out) {
    const Tensor cols = unfold(x);
    if (grad_out.rows() != cols.rows() || grad_out.cols() != out_) {
        throw ShapeError("layer backward: grad " + grad_out.shape_string() + " does not match output [" +
                         std::to_string(cols.rows()) + "x" + std::to_string(out_) + "]");
    }
    Tensor grad_cols = nk::linear_backward(cols, grad_out, weight_, bias_);
    if (lora_ && lora_->enabled && !lora_->merged) {
        LoraPair& p = *lora_;
        const double s = p.scale();
        const Tensor zero_r({static_cast<std::size_t>(p.rank)});
        const Tensor u = nk::linear_forward(cols, p.a.value, zero_r);
        if (p.b.trainable) nk::accumulate_outer(grad_out, u, p.b.grad, s);
        Tensor gu = nk::linear_input_grad(grad_out, p.b.value);
        for (float& v : gu.data()) v = static_cast<float>(s * static_cast<double>(v));
        if (p.a.trainable) nk::accumulate_outer(gu, cols, p.a.grad);
        const Tensor gc = nk::linear_input_grad(gu, p.a.value);
        for (std::size_t i = 0; i < grad_cols.size(); ++i) grad_cols[i] += gc[i];
    }
    return fold(grad_cols);
}

void AdaptableLayer::check_rank(int rank) const {
    const auto limit = static_cast<long>(std::min(d_in_eff(), d_out_eff()));
    if (rank < 1 || rank > limit) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " out of range [1, " + std::to_string(limit) +
                          "] for a " + layer_kind_name(kind_) + " layer with d_in_eff=" +
                          std::to_string(d_in_eff()) + ", d_out_eff=" + std::to_string(d_out_eff()));
    }
}

void AdaptableLayer::install(LoraPair pair) {
    saved_weight_trainable_ = weight_.trainable;
    saved_bias_trainable_ = bias_.trainable;
    weight_.trainable = false;
    bias_.trainable = false;
    weight_.zero_grad();
    bias_.zero_grad();
    lora_ = std::move(pair);
}

void AdaptableLayer::attach(int rank, float alpha, Rng& rng) {
    if (lora_) throw StateError("layer already has an adapter attached");
    check_rank(rank);
    if (!(alpha > 0.0f)) throw ConfigError("LoRA alpha must be positive");
    const auto r = static_cast<std::size_t>(rank);
    Tensor a({r, d_in_eff()});
    for (float& v : a.data()) v = static_cast<float>(kLoraInitStd * rng.normal());
    LoraPair pair;
    pair.a = Param(std::move(a));
    pair.b = Param(Tensor({d_out_eff(), r}));
    pair.rank = rank;
    pair.alpha = alpha;
    install(std::move(pair));
}

void AdaptableLayer::attach(const Tensor& a, const Tensor& b, int rank, float alpha) {
    if (lora_) throw StateError("layer already has an adapter attached");
    check_rank(rank);
    if (!(alpha > 0.0f)) throw ConfigError("LoRA alpha must be positive");
    const auto r = static_cast<std::size_t>(rank);
    if (a.size() != r * d_in_eff() || b.size() != d_out_eff() * r) {
        throw ShapeError("adapter factors " + a.shape_string() + " / " + b.shape_string() +
                         " do not fit rank " + std::to_string(rank) + " on a [" + std::to_string(d_out_eff()) +
                         "x" + std::to_string(d_in_eff()) + "] layer");
    }
    LoraPair pair;
    pair.a = Param(a.reshaped({r, d_in_eff()}));
    pair.b = Param(b.reshaped({d_out_eff(), r}));
    pair.rank = rank;
    pair.alpha = alpha;
    install(std::move(pair));
}

void AdaptableLayer::detach() {
    if (!lora_) throw StateError("detach: layer has no adapter attached");
    if (lora_->merged) throw StateError("detach: adapter is merged; unmerge first");
    lora_.reset();
    weight_.trainable = saved_weight_trainable_;
    bias_.trainable = saved_bias_trainable_;
}

void AdaptableLayer::set_enabled(bool enabled) { lora_pair().enabled = enabled; }

std::vector<double> AdaptableLayer::delta() const {
    const LoraPair& p = *lora_;
    const std::size_t r = static_cast<std::size_t>(p.rank), din = d_in_eff(), dout = d_out_eff();
    const double s = p.scale();
    std::vector<double> d(dout * din, 0.0);
    for (std::size_t o = 0; o < dout; ++o) {
        double* row = d.data() + o * din;
        for (std::size_t q = 0; q < r; ++q) {
            const double bq = p.b.value[o * r + q];
            if (bq == 0.0) continue;
            const float* arow = p.a.value.data().data() + q * din;
            for (std::size_t c = 0; c < din; ++c) row[c] += bq * static_cast<double>(arow[c]);
        }
        for (std::size_t c = 0; c < din; ++c) row[c] *= s;
    }
    return d;
}

void AdaptableLayer::merge() {
    LoraPair& p = lora_pair();
    if (p.merged) throw StateError("merge: adapter already merged");
    const std::vector<double> d = delta();
    premerge_weight_ = weight_.value.data();
    std::vector<float>& w = weight_.value.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
        w[i] = static_cast<float>(static_cast<double>(w[i]) + d[i]);
    }
    p.merged = true;
}

void AdaptableLayer::unmerge() {
    LoraPair& p = lora_pair();
    if (!p.merged) throw StateError("unmerge: adapter is not merged");
    // Subtracting the same double product is not an exact inverse once the
    // merged sum has been rounded to float, so the pre-merge weight is kept.
    weight_.value.data() = std::move(premerge_weight_);
    premerge_weight_.clear();
    p.merged = false;
}

} // namespace emolora
