#include "emolora/numkern.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "emolora/errors.hpp"

namespace emolora::nk {

namespace {

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(what) + " must be a matrix, got " + t.shape_string());
    }
}

std::vector<double>& scratch(std::size_t n) {
    thread_local std::vector<double> buf;
    if (buf.size() < n) buf.resize(n);
    return buf;
}

Tensor transpose(const Tensor& w) {
    const std::size_t r = w.rows(), c = w.cols();
    Tensor t({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) t[j * r + i] = w[i * c + j];
    }
    return t;
}

// out[i, :] = sum_p a[i, p] * b[p, :] accumulated into acc (size n), then
// handed to `emit` for each row.
template <typename Emit>
void row_products(const float* a, std::size_t m, std::size_t k, const float* b, std::size_t n,
                  Emit&& emit) {
    std::vector<double>& acc = scratch(n);
    for (std::size_t i = 0; i < m; ++i) {
        std::fill(acc.begin(), acc.begin() + static_cast<std::ptrdiff_t>(n), 0.0);
        const float* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            const float* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
        }
        emit(i, acc.data());
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul lhs");
    require_matrix(b, "matmul rhs");
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner dimension mismatch: " + a.shape_string() + " x " + b.shape_string());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    row_products(a.data().data(), m, k, b.data().data(), n, [&](std::size_t i, const double* acc) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<float>(acc[j]);
    });
    return out;
}

Tensor linear_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_matrix(x, "linear input");
    if (w.rank() < 2) throw ShapeError("linear weight must be at least 2-D, got " + w.shape_string());
    if (x.cols() != w.cols() || b.size() != w.rows()) {
        throw ShapeError("linear shape mismatch: input " + x.shape_string() + ", weight " + w.shape_string() +
                         ", bias " + b.shape_string());
    }
    const std::size_t rows = x.rows(), in = w.cols(), out_dim = w.rows();
    const Tensor wt = transpose(w);
    Tensor out({rows, out_dim});
    row_products(x.data().data(), rows, in, wt.data().data(), out_dim, [&](std::size_t i, const double* acc) {
        for (std::size_t o = 0; o < out_dim; ++o) {
            out[i * out_dim + o] = static_cast<float>(acc[o] + static_cast<double>(b[o]));
        }
    });
    return out;
}

Tensor linear_input_grad(const Tensor& grad_out, const Tensor& w) {
    if (grad_out.cols() != w.rows()) {
        throw ShapeError("linear backward mismatch: grad " + grad_out.shape_string() + ", weight " +
                         w.shape_string());
    }
    const std::size_t m = grad_out.rows(), k = w.rows(), n = w.cols();
    Tensor out({m, n});
    row_products(grad_out.data().data(), m, k, w.data().data(), n, [&](std::size_t i, const double* acc) {
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<float>(acc[j]);
    });
    return out;
}

void accumulate_outer(const Tensor& grad_out, const Tensor& x, Tensor& dst, double scale) {
    const std::size_t rows = x.rows(), in = x.cols(), out_dim = grad_out.cols();
    if (grad_out.rows() != rows || dst.rows() != out_dim || dst.size() != out_dim * in) {
        throw ShapeError("outer-product accumulation mismatch: grad " + grad_out.shape_string() + ", input " +
                         x.shape_string() + ", target " + dst.shape_string());
    }
    std::vector<double>& acc = scratch(in);
    for (std::size_t o = 0; o < out_dim; ++o) {
        std::fill(acc.begin(), acc.begin() + static_cast<std::ptrdiff_t>(in), 0.0);
        for (std::size_t t = 0; t < rows; ++t) {
            const double g = grad_out[t * out_dim + o];
            if (g == 0.0) continue;
            const float* xr = x.data().data() + t * in;
            for (std::size_t i = 0; i < in; ++i) acc[i] += g * static_cast<double>(xr[i]);
        }
        float* d = dst.data().data() + o * in;
        for (std::size_t i = 0; i < in; ++i) d[i] += static_cast<float>(scale * acc[i]);
    }
}

Tensor linear_backward(const Tensor& x, const Tensor& grad_out, Param& w, Param& b) {
    if (grad_out.rows() != x.rows() || grad_out.cols() != w.value.rows()) {
        throw ShapeError("linear backward mismatch: input " + x.shape_string() + ", grad " +
                         grad_out.shape_string() + ", weight " + w.value.shape_string());
    }
    if (w.trainable) accumulate_outer(grad_out, x, w.grad);
    if (b.trainable) {
        const std::size_t out_dim = grad_out.cols();
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = 0.0;
            for (std::size_t t = 0; t < grad_out.rows(); ++t) s += grad_out[t * out_dim + o];
            b.grad[o] += static_cast<float>(s);
        }
    }
    return linear_input_grad(grad_out, w.value);
}

Tensor im2col(const Tensor& x, std::size_t k) {
    require_matrix(x, "conv input");
    if (k % 2 == 0) throw ConfigError("conv1d kernel size must be odd, got " + std::to_string(k));
    const std::size_t T = x.rows(), in = x.cols();
    const long pad = static_cast<long>((k - 1) / 2);
    Tensor cols({T, in * k});
    for (std::size_t t = 0; t < T; ++t) {
        float* dst = cols.data().data() + t * in * k;
        for (std::size_t j = 0; j < k; ++j) {
            const long src = static_cast<long>(t) + static_cast<long>(j) - pad;
            if (src < 0 || src >= static_cast<long>(T)) continue;
            const float* xr = x.data().data() + static_cast<std::size_t>(src) * in;
            for (std::size_t i = 0; i < in; ++i) dst[i * k + j] = xr[i];
        }
    }
    return cols;
}

Tensor col2im(const Tensor& cols, std::size_t in, std::size_t k) {
    if (cols.cols() != in * k) {
        throw ShapeError("col2im width " + std::to_string(cols.cols()) + " != in*k = " + std::to_string(in * k));
    }
    const std::size_t T = cols.rows();
    const long pad = static_cast<long>((k - 1) / 2);
    Tensor x({T, in});
    for (std::size_t t = 0; t < T; ++t) {
        const float* src = cols.data().data() + t * in * k;
        for (std::size_t j = 0; j < k; ++j) {
            const long dst = static_cast<long>(t) + static_cast<long>(j) - pad;
            if (dst < 0 || dst >= static_cast<long>(T)) continue;
            float* xr = x.data().data() + static_cast<std::size_t>(dst) * in;
            for (std::size_t i = 0; i < in; ++i) xr[i] += src[i * k + j];
        }
    }
    return x;
}

Tensor conv1d_forward(const Tensor& x, const Tensor& kernel, const Tensor& b) {
    if (kernel.rank() != 3) throw ShapeError("conv1d kernel must be [out x in x k], got " + kernel.shape_string());
    const std::size_t k = kernel.shape()[2];
    if (k % 2 == 0) throw ConfigError("conv1d kernel size must be odd, got " + std::to_string(k));
    if (x.cols() != kernel.shape()[1]) {
        throw ShapeError("conv1d input " + x.shape_string() + " does not match kernel " + kernel.shape_string());
    }
    return linear_forward(im2col(x, k), kernel, b);
}

Tensor conv1d_backward(const Tensor& x, const Tensor& grad_out, Param& kernel, Param& b) {
    const std::size_t in = kernel.value.shape()[1], k = kernel.value.shape()[2];
    const Tensor cols = im2col(x, k);
    if (kernel.trainable) accumulate_outer(grad_out, cols, kernel.grad);
    if (b.trainable) {
        for (std::size_t o = 0; o < grad_out.cols(); ++o) {
            double s = 0.0;
            for (std::size_t t = 0; t < grad_out.rows(); ++t) s += grad_out.at(t, o);
            b.grad[o] += static_cast<float>(s);
        }
    }
    return col2im(linear_input_grad(grad_out, kernel.value), in, k);
}

Tensor relu(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data()) v = v > 0.0f ? v : 0.0f;
    return y;
}

Tensor relu_backward(const Tensor& pre, const Tensor& grad_out) {
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!(pre[i] > 0.0f)) g[i] = 0.0f;
    }
    return g;
}

Tensor tanh(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data()) v = static_cast<float>(std::tanh(static_cast<double>(v)));
    return y;
}

Tensor tanh_backward(const Tensor& out, const Tensor& grad_out) {
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = out[i];
        g[i] = static_cast<float>(static_cast<double>(grad_out[i]) * (1.0 - y * y));
    }
    return g;
}

Tensor softplus(const Tensor& x) {
    Tensor y = x;
    for (float& v : y.data()) {
        const double d = v;
        v = static_cast<float>(std::max(d, 0.0) + std::log1p(std::exp(-std::abs(d))));
    }
    return y;
}

Tensor softplus_backward(const Tensor& pre, const Tensor& grad_out) {
    Tensor g = grad_out;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double sig = 1.0 / (1.0 + std::exp(-static_cast<double>(pre[i])));
        g[i] = static_cast<float>(static_cast<double>(grad_out[i]) * sig);
    }
    return g;
}

double mse_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("mse shape mismatch: " + pred.shape_string() + " vs " + target.shape_string());
    }
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

Tensor mse_grad(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw ShapeError("mse shape mismatch: " + pred.shape_string() + " vs " + target.shape_string());
    }
    Tensor g(pred.shape());
    const double scale = 2.0 / static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        g[i] = static_cast<float>(scale * (static_cast<double>(pred[i]) - static_cast<double>(target[i])));
    }
    return g;
}

Tensor finite_diff_grad(const std::function<double()>& f, Param& p, double eps) {
    if (!(eps > 0.0)) throw ConfigError("finite difference step must be positive");
    Tensor g(p.value.shape());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
        const float orig = p.value[i];
        const float up = static_cast<float>(static_cast<double>(orig) + eps);
        const float down = static_cast<float>(static_cast<double>(orig) - eps);
        p.value[i] = up;
        const double f_up = f();
        p.value[i] = down;
        const double f_down = f();
        p.value[i] = orig;
        if (!std::isfinite(f_up) || !std::isfinite(f_down)) {
            throw NumericError("non-finite objective during finite differences at coordinate " + std::to_string(i));
        }
        g[i] = static_cast<float>((f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down)));
    }
    return g;
}

} // namespace emolora::nk
