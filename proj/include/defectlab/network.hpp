#pragma once

// A small feed-forward CNN with hand-written backpropagation.
//
// Activations are NHWC; conv weights are (kh, kw, in_c, out_c) and dense
// weights (in, out), so both layers reduce to the same row-times-matrix
// kernel. All reductions run in a fixed order, which makes forward and
// backward passes bit-reproducible.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "random.hpp"
#include "tensor.hpp"

namespace defectlab::nn {

enum class LayerKind { conv2d, relu, maxpool, flatten, dense, softmax };

inline std::string to_string(LayerKind k) {
    switch (k) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool: return "maxpool";
        case LayerKind::flatten: return "flatten";
        case LayerKind::dense: return "dense";
        case LayerKind::softmax: return "softmax";
    }
    return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
    for (auto k : {LayerKind::conv2d, LayerKind::relu, LayerKind::maxpool, LayerKind::flatten, LayerKind::dense,
                   LayerKind::softmax})
        if (to_string(k) == s) return k;
    throw SpecError("unknown layer kind '" + s + "'");
}

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int units = 0;  // conv out_channels or dense units
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    int window = 0;  // maxpool

    bool has_params() const noexcept { return kind == LayerKind::conv2d || kind == LayerKind::dense; }
    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline LayerSpec Conv2D(int out_channels, int kernel, int stride = 1, int padding = 0) {
    return {LayerKind::conv2d, out_channels, kernel, stride, padding, 0};
}
inline LayerSpec ReLU() { return {LayerKind::relu}; }
inline LayerSpec MaxPool(int window, int stride = 0) {
    return {LayerKind::maxpool, 0, 0, stride > 0 ? stride : window, 0, window};
}
inline LayerSpec Flatten() { return {LayerKind::flatten}; }
inline LayerSpec Dense(int units) { return {LayerKind::dense, units}; }
inline LayerSpec Softmax() { return {LayerKind::softmax}; }

struct NetworkSpec {
    Shape input_shape;  // (H, W, C)
    std::vector<LayerSpec> layers;
    int embedding_layer = -1;  // index of the Dense whose output is the feature embedding; -1 for none

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;

    /// Conv 3x3x16/ReLU -> MaxPool 2 -> Conv 3x3x32/ReLU -> MaxPool 2 -> Flatten
    /// -> Dense 128 (embedding) -> Dense K -> Softmax.
    static NetworkSpec standard(int side = 64, int classes = 4, int channels = 1) {
        NetworkSpec s;
        s.input_shape = {side, side, channels};
        s.layers = {Conv2D(16, 3), ReLU(), MaxPool(2), Conv2D(32, 3), ReLU(), MaxPool(2), Flatten(),
                    Dense(128),    Dense(classes), Softmax()};
        s.embedding_layer = 7;
        return s;
    }

    // Per-sample output shape of every layer; throws SpecError naming the
    // first layer whose input does not fit.
    std::vector<Shape> output_shapes() const {
        if (input_shape.size() != 3 || shape_size(input_shape) == 0 ||
            std::any_of(input_shape.begin(), input_shape.end(), [](int d) { return d <= 0; }))
            throw SpecError("input shape must be (H, W, C) with positive entries");
        if (layers.empty()) throw SpecError("network has no layers");
        std::vector<Shape> out;
        Shape cur = input_shape;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
            switch (l.kind) {
                case LayerKind::conv2d: {
                    if (cur.size() != 3) throw SpecError(where + " needs an (H, W, C) input, got " + shape_string(cur));
                    if (l.units <= 0 || l.kernel <= 0 || l.stride <= 0 || l.padding < 0)
                        throw SpecError(where + " has invalid hyper-parameters");
                    const int oh = (cur[0] + 2 * l.padding - l.kernel) / l.stride + 1;
                    const int ow = (cur[1] + 2 * l.padding - l.kernel) / l.stride + 1;
                    if (cur[0] + 2 * l.padding < l.kernel || cur[1] + 2 * l.padding < l.kernel || oh <= 0 || ow <= 0)
                        throw SpecError(where + " kernel larger than input " + shape_string(cur));
                    cur = {oh, ow, l.units};
                    break;
                }
                case LayerKind::maxpool: {
                    if (cur.size() != 3) throw SpecError(where + " needs an (H, W, C) input, got " + shape_string(cur));
                    if (l.window <= 0 || l.stride <= 0) throw SpecError(where + " has invalid window/stride");
                    if (cur[0] < l.window || cur[1] < l.window)
                        throw SpecError(where + " window larger than input " + shape_string(cur));
                    cur = {(cur[0] - l.window) / l.stride + 1, (cur[1] - l.window) / l.stride + 1, cur[2]};
                    break;
                }
                case LayerKind::flatten: cur = {static_cast<int>(shape_size(cur))}; break;
                case LayerKind::dense:
                    if (cur.size() != 1) throw SpecError(where + " needs a flat input, got " + shape_string(cur));
                    if (l.units <= 0) throw SpecError(where + " needs positive units");
                    cur = {l.units};
                    break;
                case LayerKind::relu: break;
                case LayerKind::softmax:
                    if (cur.size() != 1) throw SpecError(where + " needs a flat input, got " + shape_string(cur));
                    if (i + 1 != layers.size()) throw SpecError(where + " must be the last layer");
                    break;
            }
            out.push_back(cur);
        }
        return out;
    }

    void validate() const {
        const auto shapes = output_shapes();
        if (layers.back().kind != LayerKind::softmax) throw SpecError("the last layer must be softmax");
        const auto softmaxes =
            std::count_if(layers.begin(), layers.end(), [](const auto& l) { return l.kind == LayerKind::softmax; });
        if (softmaxes != 1) throw SpecError("network must contain exactly one softmax");
        if (classifier_layer() < 0) throw SpecError("network has no dense classifier layer");
        if (embedding_layer >= 0) {
            if (embedding_layer >= static_cast<int>(layers.size()) ||
                layers[static_cast<std::size_t>(embedding_layer)].kind != LayerKind::dense)
                throw SpecError("embedding layer " + std::to_string(embedding_layer) + " is not a dense layer");
            if (embedding_layer >= classifier_layer())
                throw SpecError("embedding layer must precede the classifier dense layer");
        }
    }

    int classifier_layer() const {
        for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i)
            if (layers[static_cast<std::size_t>(i)].kind == LayerKind::dense) return i;
        return -1;
    }

    int classes() const { return layers.at(static_cast<std::size_t>(classifier_layer())).units; }

    int embedding_dim() const {
        if (embedding_layer < 0) throw SpecError("network declares no embedding layer");
        return layers.at(static_cast<std::size_t>(embedding_layer)).units;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["input_shape"] = input_shape;
        j["embedding_layer"] = embedding_layer;
        auto& ls = j["layers"] = nlohmann::json::array();
        for (const auto& l : layers) {
            nlohmann::json e{{"kind", to_string(l.kind)}};
            switch (l.kind) {
                case LayerKind::conv2d:
                    e["units"] = l.units;
                    e["kernel"] = l.kernel;
                    e["stride"] = l.stride;
                    e["padding"] = l.padding;
                    break;
                case LayerKind::maxpool:
                    e["window"] = l.window;
                    e["stride"] = l.stride;
                    break;
                case LayerKind::dense: e["units"] = l.units; break;
                default: break;
            }
            ls.push_back(std::move(e));
        }
        return j;
    }

    static NetworkSpec from_json(const nlohmann::json& j) {
        try {
            NetworkSpec s;
            s.input_shape = j.at("input_shape").get<Shape>();
            s.embedding_layer = j.value("embedding_layer", -1);
            for (const auto& e : j.at("layers")) {
                LayerSpec l;
                l.kind = layer_kind_from_string(e.at("kind").get<std::string>());
                l.units = e.value("units", 0);
                l.kernel = e.value("kernel", 0);
                l.padding = e.value("padding", 0);
                l.window = e.value("window", 0);
                l.stride = e.value("stride", l.kind == LayerKind::maxpool ? l.window : 1);
                s.layers.push_back(l);
            }
            return s;
        } catch (const nlohmann::json::exception& e) {
            throw SpecError(std::string("invalid network description: ") + e.what());
        }
    }
};

struct LayerParams {
    Tensor weight;
    Tensor bias;
    bool empty() const noexcept { return weight.empty(); }
    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

// Weights and biases per layer (empty for parameter-free layers). Also used
// as the gradient container.
struct NetworkParams {
    std::vector<LayerParams> layers;
    std::uint64_t seed = 0;

    friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

// Expected (weight, bias) shapes for layer i given the spec.
inline std::pair<Shape, Shape> param_shapes(const NetworkSpec& spec, std::size_t i) {
    const auto& l = spec.layers[i];
    const Shape in = i == 0 ? spec.input_shape : spec.output_shapes()[i - 1];
    if (l.kind == LayerKind::conv2d) return {{l.kernel, l.kernel, in[2], l.units}, {l.units}};
    if (l.kind == LayerKind::dense) return {{in[0], l.units}, {l.units}};
    return {{}, {}};
}

inline NetworkParams zeros_like(const NetworkParams& p) {
    NetworkParams z;
    z.seed = p.seed;
    for (const auto& l : p.layers) {
        LayerParams g;
        if (!l.empty()) {
            g.weight = Tensor(l.weight.shape());
            g.bias = Tensor(l.bias.shape());
        }
        z.layers.push_back(std::move(g));
    }
    return z;
}

/// He-normal weights (std = sqrt(2 / fan_in)) and zero biases, one derived
/// random stream per layer.
inline NetworkParams build(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    NetworkParams p;
    p.seed = seed;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        LayerParams lp;
        if (spec.layers[i].has_params()) {
            auto [ws, bs] = param_shapes(spec, i);
            const std::size_t fan_in = shape_size(ws) / static_cast<std::size_t>(ws.back());
            const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
            Rng rng(derive_seed(seed, 0x1a7e, i));
            lp.weight = Tensor(ws);
            for (auto& w : lp.weight.values()) w = stddev * rng.normal();
            lp.bias = Tensor(bs, 0.0);
        }
        p.layers.push_back(std::move(lp));
    }
    return p;
}

inline void check_params(const NetworkSpec& spec, const NetworkParams& params) {
    if (params.layers.size() != spec.layers.size())
        throw SpecError("parameter list has " + std::to_string(params.layers.size()) + " layers, spec has " +
                        std::to_string(spec.layers.size()));
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const auto [ws, bs] = param_shapes(spec, i);
        const auto& lp = params.layers[i];
        if (spec.layers[i].has_params()) {
            if (lp.weight.shape() != ws || lp.bias.shape() != bs)
                throw SpecError("layer " + std::to_string(i) + " parameters " + shape_string(lp.weight.shape()) +
                                " do not match spec " + shape_string(ws));
        } else if (!lp.empty()) {
            throw SpecError("layer " + std::to_string(i) + " should carry no parameters");
        }
    }
}

// Cached activations of one batch. activations[0] is the input and
// activations[i + 1] the output of layer i. Move-only; backward consumes it.
class ForwardTrace {
public:
    ForwardTrace() = default;
    ForwardTrace(ForwardTrace&&) = default;
    ForwardTrace& operator=(ForwardTrace&&) = default;
    ForwardTrace(const ForwardTrace&) = delete;
    ForwardTrace& operator=(const ForwardTrace&) = delete;

    std::vector<Tensor> activations;
    std::vector<std::vector<std::uint32_t>> argmax;  // maxpool winners per layer (flat input index)

    int batch() const { return activations.empty() ? 0 : activations.front().dim(0); }
    bool consumed() const noexcept { return consumed_; }
    void mark_consumed() {
        if (consumed_) throw InputError("forward trace already consumed by a backward pass");
        consumed_ = true;
    }

private:
    bool consumed_ = false;
};

namespace kernels {

// out[r][:] (+)= bias + sum_k a[r][k] * w[k][:] for `rows` rows.
inline void rows_times_matrix(const double* a, std::size_t rows, std::size_t inner, const double* w, std::size_t cols,
                              const double* bias, double* out) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* o = out + r * cols;
        for (std::size_t j = 0; j < cols; ++j) o[j] = bias[j];
        const double* ar = a + r * inner;
        for (std::size_t k = 0; k < inner; ++k) {
            const double v = ar[k];
            if (v == 0.0) continue;
            const double* wk = w + k * cols;
            for (std::size_t j = 0; j < cols; ++j) o[j] += v * wk[j];
        }
    }
}

// Unfolds one HWC sample into (oh*ow) rows of (kernel*kernel*c) values.
inline void im2col(const double* in, int h, int w, int c, const LayerSpec& l, int oh, int ow, double* cols) {
    const int k = l.kernel;
    const std::size_t row_len = static_cast<std::size_t>(k) * k * c;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            double* row = cols + (static_cast<std::size_t>(oy) * ow + ox) * row_len;
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * l.stride + ky - l.padding;
                for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox * l.stride + kx - l.padding;
                    double* dst = row + (static_cast<std::size_t>(ky) * k + kx) * c;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                        std::fill(dst, dst + c, 0.0);
                    } else {
                        const double* src = in + (static_cast<std::size_t>(iy) * w + ix) * c;
                        std::copy(src, src + c, dst);
                    }
                }
            }
        }
}

inline void col2im_add(const double* cols, int h, int w, int c, const LayerSpec& l, int oh, int ow, double* in) {
    const int k = l.kernel;
    const std::size_t row_len = static_cast<std::size_t>(k) * k * c;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            const double* row = cols + (static_cast<std::size_t>(oy) * ow + ox) * row_len;
            for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * l.stride + ky - l.padding;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox * l.stride + kx - l.padding;
                    if (ix < 0 || ix >= w) continue;
                    const double* src = row + (static_cast<std::size_t>(ky) * k + kx) * c;
                    double* dst = in + (static_cast<std::size_t>(iy) * w + ix) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
            }
        }
}

}  // namespace kernels

/// Forward pass of a single layer on a batch.
inline Tensor layer_forward(const LayerSpec& l, const LayerParams& p, const Tensor& in,
                            std::vector<std::uint32_t>* argmax = nullptr) {
    const int n = in.dim(0);
    switch (l.kind) {
        case LayerKind::conv2d: {
            const int h = in.dim(1), w = in.dim(2), c = in.dim(3);
            const int oh = (h + 2 * l.padding - l.kernel) / l.stride + 1;
            const int ow = (w + 2 * l.padding - l.kernel) / l.stride + 1;
            Tensor out({n, oh, ow, l.units});
            const std::size_t rows = static_cast<std::size_t>(oh) * ow;
            const std::size_t inner = static_cast<std::size_t>(l.kernel) * l.kernel * c;
            std::vector<double> cols(rows * inner);
            const std::size_t in_stride = static_cast<std::size_t>(h) * w * c;
            for (int s = 0; s < n; ++s) {
                kernels::im2col(in.data() + s * in_stride, h, w, c, l, oh, ow, cols.data());
                kernels::rows_times_matrix(cols.data(), rows, inner, p.weight.data(), static_cast<std::size_t>(l.units),
                                           p.bias.data(), out.data() + s * rows * l.units);
            }
            return out;
        }
        case LayerKind::dense: {
            const auto inner = static_cast<std::size_t>(in.size() / static_cast<std::size_t>(n));
            Tensor out({n, l.units});
            kernels::rows_times_matrix(in.data(), static_cast<std::size_t>(n), inner, p.weight.data(),
                                       static_cast<std::size_t>(l.units), p.bias.data(), out.data());
            return out;
        }
        case LayerKind::relu: {
            Tensor out = in;
            for (auto& v : out.values()) v = v > 0 ? v : 0.0;
            return out;
        }
        case LayerKind::maxpool: {
            const int h = in.dim(1), w = in.dim(2), c = in.dim(3);
            const int oh = (h - l.window) / l.stride + 1, ow = (w - l.window) / l.stride + 1;
            Tensor out({n, oh, ow, c});
            if (argmax) argmax->assign(out.size(), 0);
            std::size_t o = 0;
            for (int s = 0; s < n; ++s)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox)
                        for (int ch = 0; ch < c; ++ch, ++o) {
                            std::size_t best = 0;
                            double bv = -INFINITY;
                            for (int ky = 0; ky < l.window; ++ky)
                                for (int kx = 0; kx < l.window; ++kx) {
                                    const std::size_t idx =
                                        ((static_cast<std::size_t>(s) * h + oy * l.stride + ky) * w + ox * l.stride + kx) *
                                            c +
                                        ch;
                                    if (in[idx] > bv) {
                                        bv = in[idx];
                                        best = idx;
                                    }
                                }
                            out[o] = bv;
                            if (argmax) (*argmax)[o] = static_cast<std::uint32_t>(best);
                        }
            return out;
        }
        case LayerKind::flatten: {
            Tensor out = in;
            out.reshape({n, static_cast<int>(in.size() / static_cast<std::size_t>(n))});
            return out;
        }
        case LayerKind::softmax: {
            const int k = in.dim(1);
            Tensor out({n, k});
            for (int s = 0; s < n; ++s) {
                const double* z = in.data() + static_cast<std::size_t>(s) * k;
                double* p = out.data() + static_cast<std::size_t>(s) * k;
                const double m = *std::max_element(z, z + k);
                double sum = 0;
                for (int j = 0; j < k; ++j) sum += (p[j] = std::exp(z[j] - m));
                for (int j = 0; j < k; ++j) p[j] /= sum;
            }
            return out;
        }
    }
    throw SpecError("unknown layer kind");
}

/// Backward pass of a single layer. Accumulates parameter gradients into
/// `grads` and returns dL/d(input) unless `need_input_grad` is false.
inline Tensor layer_backward(const LayerSpec& l, const LayerParams& p, const Tensor& in, const Tensor& out,
                             const Tensor& grad_out, const std::vector<std::uint32_t>& argmax, LayerParams* grads,
                             bool need_input_grad) {
    const int n = in.dim(0);
    switch (l.kind) {
        case LayerKind::conv2d: {
            const int h = in.dim(1), w = in.dim(2), c = in.dim(3);
            const int oh = out.dim(1), ow = out.dim(2), oc = l.units;
            const std::size_t rows = static_cast<std::size_t>(oh) * ow;
            const std::size_t inner = static_cast<std::size_t>(l.kernel) * l.kernel * c;
            const std::size_t in_stride = static_cast<std::size_t>(h) * w * c;
            std::vector<double> cols(rows * inner), dcols(need_input_grad ? rows * inner : 0);
            Tensor grad_in = need_input_grad ? Tensor(in.shape()) : Tensor();
            for (int s = 0; s < n; ++s) {
                const double* d = grad_out.data() + static_cast<std::size_t>(s) * rows * oc;
                if (grads) {
                    kernels::im2col(in.data() + s * in_stride, h, w, c, l, oh, ow, cols.data());
                    double* dw = grads->weight.data();
                    double* db = grads->bias.data();
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* dr = d + r * oc;
                        for (int j = 0; j < oc; ++j) db[j] += dr[j];
                        const double* cr = cols.data() + r * inner;
                        for (std::size_t k = 0; k < inner; ++k) {
                            const double v = cr[k];
                            if (v == 0.0) continue;
                            double* dwk = dw + k * oc;
                            for (int j = 0; j < oc; ++j) dwk[j] += v * dr[j];
                        }
                    }
                }
                if (need_input_grad) {
                    const double* wt = p.weight.data();
                    for (std::size_t r = 0; r < rows; ++r) {
                        const double* dr = d + r * oc;
                        double* dc = dcols.data() + r * inner;
                        for (std::size_t k = 0; k < inner; ++k) {
                            const double* wk = wt + k * oc;
                            double acc = 0;
                            for (int j = 0; j < oc; ++j) acc += wk[j] * dr[j];
                            dc[k] = acc;
                        }
                    }
                    kernels::col2im_add(dcols.data(), h, w, c, l, oh, ow, grad_in.data() + s * in_stride);
                }
            }
            return grad_in;
        }
        case LayerKind::dense: {
            const std::size_t inner = in.size() / static_cast<std::size_t>(n);
            const std::size_t units = static_cast<std::size_t>(l.units);
            if (grads) {
                double* dw = grads->weight.data();
                double* db = grads->bias.data();
                for (int s = 0; s < n; ++s) {
                    const double* d = grad_out.data() + s * units;
                    for (std::size_t j = 0; j < units; ++j) db[j] += d[j];
                }
                for (std::size_t k = 0; k < inner; ++k) {
                    double* dwk = dw + k * units;
                    for (int s = 0; s < n; ++s) {
                        const double v = in[s * inner + k];
                        if (v == 0.0) continue;
                        const double* d = grad_out.data() + s * units;
                        for (std::size_t j = 0; j < units; ++j) dwk[j] += v * d[j];
                    }
                }
            }
            if (!need_input_grad) return {};
            Tensor grad_in(in.shape());
            const double* wt = p.weight.data();
            for (int s = 0; s < n; ++s) {
                const double* d = grad_out.data() + s * units;
                double* gi = grad_in.data() + s * inner;
                for (std::size_t k = 0; k < inner; ++k) {
                    const double* wk = wt + k * units;
                    double acc = 0;
                    for (std::size_t j = 0; j < units; ++j) acc += wk[j] * d[j];
                    gi[k] = acc;
                }
            }
            return grad_in;
        }
        case LayerKind::relu: {
            if (!need_input_grad) return {};
            Tensor grad_in = grad_out;
            for (std::size_t i = 0; i < grad_in.size(); ++i)
                if (!(in[i] > 0)) grad_in[i] = 0.0;
            return grad_in;
        }
        case LayerKind::maxpool: {
            if (!need_input_grad) return {};
            Tensor grad_in(in.shape());
            for (std::size_t o = 0; o < grad_out.size(); ++o) grad_in[argmax[o]] += grad_out[o];
            return grad_in;
        }
        case LayerKind::flatten: {
            if (!need_input_grad) return {};
            Tensor grad_in = grad_out;
            grad_in.reshape(in.shape());
            return grad_in;
        }
        case LayerKind::softmax: {
            if (!need_input_grad) return {};
            const int k = out.dim(1);
            Tensor grad_in(in.shape());
            for (int s = 0; s < n; ++s) {
                const double* pr = out.data() + static_cast<std::size_t>(s) * k;
                const double* d = grad_out.data() + static_cast<std::size_t>(s) * k;
                double dot = 0;
                for (int j = 0; j < k; ++j) dot += pr[j] * d[j];
                for (int j = 0; j < k; ++j) grad_in[static_cast<std::size_t>(s) * k + j] = pr[j] * (d[j] - dot);
            }
            return grad_in;
        }
    }
    throw SpecError("unknown layer kind");
}

inline void check_batch(const NetworkSpec& spec, const Tensor& batch) {
    if (batch.rank() != 4 || batch.dim(1) != spec.input_shape[0] || batch.dim(2) != spec.input_shape[1] ||
        batch.dim(3) != spec.input_shape[2])
        throw InputError("batch shape " + shape_string(batch.shape()) + " does not match network input (N," +
                         shape_string(spec.input_shape).substr(1));
}

/// Runs layers [0, last_layer] (default: all) and caches every activation.
inline ForwardTrace forward_trace(const NetworkSpec& spec, const NetworkParams& params, const Tensor& batch,
                                  int last_layer = -1) {
    check_batch(spec, batch);
    if (last_layer < 0) last_layer = static_cast<int>(spec.layers.size()) - 1;
    ForwardTrace t;
    t.activations.reserve(static_cast<std::size_t>(last_layer) + 2);
    t.argmax.resize(static_cast<std::size_t>(last_layer) + 1);
    t.activations.push_back(batch);
    for (int i = 0; i <= last_layer; ++i) {
        const auto idx = static_cast<std::size_t>(i);
        t.activations.push_back(layer_forward(spec.layers[idx], params.layers[idx], t.activations.back(),
                                              spec.layers[idx].kind == LayerKind::maxpool ? &t.argmax[idx] : nullptr));
    }
    return t;
}

struct ForwardResult {
    Tensor probs;  // N x K
    ForwardTrace trace;
};

inline ForwardResult forward(const NetworkSpec& spec, const NetworkParams& params, const Tensor& batch) {
    auto trace = forward_trace(spec, params, batch);
    Tensor probs = trace.activations.back();
    return {std::move(probs), std::move(trace)};
}

/// Backpropagates `grad_out` (dL/d output of layer `from_layer`) down to
/// layer `lowest_layer`, consuming the trace. Layers below `lowest_layer`
/// get no gradient (frozen feature extractor).
inline NetworkParams backward(const NetworkSpec& spec, const NetworkParams& params, ForwardTrace&& trace,
                              int from_layer, Tensor grad_out, int lowest_layer = 0) {
    trace.mark_consumed();
    auto grads = zeros_like(params);
    for (int i = from_layer; i >= lowest_layer; --i) {
        const auto idx = static_cast<std::size_t>(i);
        const auto& l = spec.layers[idx];
        LayerParams* g = l.has_params() ? &grads.layers[idx] : nullptr;
        grad_out = layer_backward(l, params.layers[idx], trace.activations[idx], trace.activations[idx + 1], grad_out,
                                  trace.argmax[idx], g, i > lowest_layer);
    }
    return grads;
}

struct LossGrad {
    double loss = 0;
    NetworkParams grads;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Class-weighted cross-entropy  mean_i w[y_i] * -log(max(p_i[y_i], 1e-12))
/// and its exact gradient. Softmax and cross-entropy are differentiated
/// together: dL/dz_i = w[y_i] (p_i - onehot(y_i)) / N.
inline LossGrad loss_and_grad(const NetworkSpec& spec, const NetworkParams& params, ForwardTrace&& trace,
                              const Tensor& probs, const std::vector<int>& labels, const std::vector<double>& class_weights,
                              int lowest_layer = 0) {
    const int n = probs.dim(0), k = probs.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw InputError("label count " + std::to_string(labels.size()) + " does not match batch " + std::to_string(n));
    if (!class_weights.empty() && static_cast<int>(class_weights.size()) != k)
        throw InputError("class weight count does not match class count");
    Tensor dlogits({n, k});
    double loss = 0;
    for (int s = 0; s < n; ++s) {
        const int y = labels[static_cast<std::size_t>(s)];
        if (y < 0 || y >= k) throw LabelError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
        const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(y)];
        const double* p = probs.data() + static_cast<std::size_t>(s) * k;
        loss += w * -std::log(std::max(p[y], kProbabilityFloor));
        double* d = dlogits.data() + static_cast<std::size_t>(s) * k;
        for (int j = 0; j < k; ++j) d[j] = w * (p[j] - (j == y ? 1.0 : 0.0)) / n;
    }
    const int softmax_layer = static_cast<int>(spec.layers.size()) - 1;
    auto grads = backward(spec, params, std::move(trace), softmax_layer - 1, std::move(dlogits), lowest_layer);
    return {loss / n, std::move(grads)};
}

}  // namespace defectlab::nn
