#pragma once

// Three conv/pool stages and two dense layers, trained with Adam.
//
//   input s x s x C
//   conv3x3 (VALID, stride 1) -> ReLU -> maxpool 2x2 stride 2   x3
//   flatten -> fc(hidden) -> ReLU -> dropout -> fc(classes) -> softmax
//
// All arithmetic is in double precision. Tensors are channel-last
// (H x W x C, row-major), the same layout as SampleImage.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "omicsmap/error.hpp"
#include "omicsmap/io.hpp"
#include "omicsmap/render.hpp"
#include "omicsmap/seed.hpp"

namespace omicsmap {

using Tensor = Image<double>;

namespace detail {
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;
using CMapRow = Eigen::Map<const Eigen::RowVectorXd>;
} // namespace detail

inline int conv_side(int n) { return n - 2; }
inline int pool_side(int n) { return (n - 2) / 2 + 1; }

struct Architecture {
    int input_side = 512;
    int channels = 1;
    int n_classes = 3;
    std::array<int, 3> filters{32, 32, 64};
    int hidden = 128;

    /// Spatial sides: input, conv1, pool1, conv2, pool2, conv3, pool3.
    std::array<int, 7> sides() const {
        std::array<int, 7> s{};
        s[0] = input_side;
        for (int k = 0; k < 3; ++k) {
            const int in = s[static_cast<std::size_t>(2 * k)];
            if (in < 3)
                fail(ErrorKind::ShapeMismatch, "input side " + std::to_string(input_side) + " too small for conv" +
                                                   std::to_string(k + 1));
            s[static_cast<std::size_t>(2 * k + 1)] = conv_side(in);
            if (conv_side(in) < 2)
                fail(ErrorKind::ShapeMismatch, "input side " + std::to_string(input_side) + " too small for pool" +
                                                   std::to_string(k + 1));
            s[static_cast<std::size_t>(2 * k + 2)] = pool_side(conv_side(in));
        }
        return s;
    }
    int pool3_side() const { return sides()[6]; }
    int flat_size() const { return pool3_side() * pool3_side() * filters[2]; }
    int in_channels(int layer) const { return layer == 0 ? channels : filters[static_cast<std::size_t>(layer - 1)]; }
    bool operator==(const Architecture&) const = default;
};

/// Offsets of each parameter group inside the flat parameter vector.
struct ParamLayout {
    struct Block {
        std::size_t offset = 0, size = 0;
    };
    std::array<Block, 3> conv_w, conv_b;
    Block fc1_w, fc1_b, fc2_w, fc2_b;
    std::size_t total = 0;

    explicit ParamLayout(const Architecture& a) {
        auto take = [&](std::size_t n) {
            Block b{total, n};
            total += n;
            return b;
        };
        for (int k = 0; k < 3; ++k) {
            const auto ku = static_cast<std::size_t>(k);
            conv_w[ku] = take(static_cast<std::size_t>(9 * a.in_channels(k) * a.filters[ku]));
            conv_b[ku] = take(static_cast<std::size_t>(a.filters[ku]));
        }
        fc1_w = take(static_cast<std::size_t>(a.flat_size()) * a.hidden);
        fc1_b = take(static_cast<std::size_t>(a.hidden));
        fc2_w = take(static_cast<std::size_t>(a.hidden * a.n_classes));
        fc2_b = take(static_cast<std::size_t>(a.n_classes));
    }
    std::vector<std::pair<std::string, Block>> named() const {
        return {{"conv1_w", conv_w[0]}, {"conv1_b", conv_b[0]}, {"conv2_w", conv_w[1]}, {"conv2_b", conv_b[1]},
                {"conv3_w", conv_w[2]}, {"conv3_b", conv_b[2]}, {"fc1_w", fc1_w},       {"fc1_b", fc1_b},
                {"fc2_w", fc2_w},       {"fc2_b", fc2_b}};
    }
};

struct CnnModel {
    Architecture arch;
    std::vector<double> params;

    CnnModel() : CnnModel(Architecture{}) {}
    explicit CnnModel(const Architecture& a) : arch(a), params(ParamLayout(a).total, 0.0) {}

    ParamLayout layout() const { return ParamLayout(arch); }
    std::span<double> block(const ParamLayout::Block& b) { return {params.data() + b.offset, b.size}; }
    std::span<const double> block(const ParamLayout::Block& b) const { return {params.data() + b.offset, b.size}; }
    bool operator==(const CnnModel&) const = default;
};

/// He-style initialization: weights ~ N(0, 2/fan_in), biases zero.
inline CnnModel init_model(const Architecture& arch, std::uint64_t seed) {
    CnnModel m(arch);
    const ParamLayout L(arch);
    std::mt19937_64 rng(seed);
    auto fill = [&](const ParamLayout::Block& b, int fan_in) {
        std::normal_distribution<double> d(0.0, std::sqrt(2.0 / fan_in));
        for (auto& w : m.block(b)) w = d(rng);
    };
    for (int k = 0; k < 3; ++k) fill(L.conv_w[static_cast<std::size_t>(k)], 9 * arch.in_channels(k));
    fill(L.fc1_w, arch.flat_size());
    fill(L.fc2_w, arch.hidden);
    return m;
}

// ---------------------------------------------------------------- layers

namespace detail {

inline void im2col(const Tensor& in, std::vector<double>& col) {
    const int ho = in.height - 2, wo = in.width - 2, c = in.channels;
    const std::size_t row_len = static_cast<std::size_t>(9 * c);
    col.resize(static_cast<std::size_t>(ho) * wo * row_len);
    double* dst = col.data();
    for (int r = 0; r < ho; ++r)
        for (int q = 0; q < wo; ++q)
            for (int ky = 0; ky < 3; ++ky) {
                const double* src = &in.data[in.index(r + ky, q, 0)];
                std::copy(src, src + 3 * c, dst);
                dst += 3 * c;
            }
}

inline void col2im_add(const std::vector<double>& col, Tensor& grad_in) {
    const int ho = grad_in.height - 2, wo = grad_in.width - 2, c = grad_in.channels;
    const double* src = col.data();
    for (int r = 0; r < ho; ++r)
        for (int q = 0; q < wo; ++q)
            for (int ky = 0; ky < 3; ++ky) {
                double* dst = &grad_in.data[grad_in.index(r + ky, q, 0)];
                for (int i = 0; i < 3 * c; ++i) dst[i] += src[i];
                src += 3 * c;
            }
}

} // namespace detail

/// VALID 3x3 cross-correlation. `kernels` is laid out 3 x 3 x Cin x Cout.
inline Tensor conv2d_valid(const Tensor& input, std::span<const double> kernels, std::span<const double> bias) {
    if (input.height < 3 || input.width < 3) fail(ErrorKind::ShapeMismatch, "conv input smaller than 3x3");
    const int cout = static_cast<int>(bias.size());
    if (kernels.size() != static_cast<std::size_t>(9 * input.channels * cout))
        fail(ErrorKind::ShapeMismatch, "kernel size does not match input channels");
    Tensor out(input.height - 2, input.width - 2, cout);
    thread_local std::vector<double> col;
    detail::im2col(input, col);
    const int rows = out.height * out.width, k = 9 * input.channels;
    detail::MapMat o(out.data.data(), rows, cout);
    o.noalias() = detail::CMapMat(col.data(), rows, k) * detail::CMapMat(kernels.data(), k, cout);
    o.rowwise() += detail::CMapRow(bias.data(), cout);
    return out;
}

/// Accumulates kernel and bias gradients; returns the input gradient when
/// `want_input_grad` is set (otherwise an empty tensor).
inline Tensor conv2d_valid_backward(const Tensor& input, const Tensor& grad_out, std::span<const double> kernels,
                                    std::span<double> grad_kernels, std::span<double> grad_bias, bool want_input_grad) {
    const int rows = grad_out.height * grad_out.width, k = 9 * input.channels, cout = grad_out.channels;
    thread_local std::vector<double> col;
    detail::im2col(input, col);
    detail::CMapMat go(grad_out.data.data(), rows, cout);
    detail::MapMat(grad_kernels.data(), k, cout).noalias() += detail::CMapMat(col.data(), rows, k).transpose() * go;
    detail::MapVec(grad_bias.data(), cout) += go.colwise().sum().transpose();
    if (!want_input_grad) return {};
    detail::MapMat dcol(col.data(), rows, k);
    dcol.noalias() = go * detail::CMapMat(kernels.data(), k, cout).transpose();
    Tensor grad_in(input.height, input.width, input.channels, 0.0);
    detail::col2im_add(col, grad_in);
    return grad_in;
}

struct PoolResult {
    Tensor output;
    std::vector<std::uint32_t> argmax; // flat input index per output element
};

/// 2x2 max pooling, stride 2, VALID. Ties keep the first window position
/// in row-major order.
inline PoolResult maxpool2(const Tensor& in) {
    if (in.height < 2 || in.width < 2) fail(ErrorKind::ShapeMismatch, "pool input smaller than 2x2");
    PoolResult res{Tensor(pool_side(in.height), pool_side(in.width), in.channels), {}};
    res.argmax.resize(res.output.data.size());
    for (int r = 0; r < res.output.height; ++r)
        for (int c = 0; c < res.output.width; ++c)
            for (int ch = 0; ch < in.channels; ++ch) {
                std::size_t best = in.index(2 * r, 2 * c, ch);
                for (auto [dr, dc] : {std::pair{0, 1}, std::pair{1, 0}, std::pair{1, 1}}) {
                    const std::size_t i = in.index(2 * r + dr, 2 * c + dc, ch);
                    if (in.data[i] > in.data[best]) best = i;
                }
                const std::size_t o = res.output.index(r, c, ch);
                res.output.data[o] = in.data[best];
                res.argmax[o] = static_cast<std::uint32_t>(best);
            }
    return res;
}

inline Tensor maxpool2_backward(const PoolResult& pool, const Tensor& grad_out, int in_h, int in_w) {
    Tensor g(in_h, in_w, grad_out.channels, 0.0);
    for (std::size_t o = 0; o < grad_out.data.size(); ++o) g.data[pool.argmax[o]] += grad_out.data[o];
    return g;
}

inline void relu_inplace(Tensor& t) {
    for (auto& v : t.data) v = v > 0 ? v : 0.0;
}

// --------------------------------------------------------- forward trace

enum class Mode { Train, Eval };

struct SampleTrace {
    std::array<Tensor, 3> conv;      // post-ReLU conv outputs
    std::array<PoolResult, 3> pool;  // pooled maps + argmax routes
    std::vector<double> hidden_pre;  // fc1 pre-activation
    std::vector<double> hidden;      // after ReLU and dropout scaling
    std::vector<double> mask;        // 1 kept, 0 dropped (all 1 in eval)
    std::vector<double> logits;
    std::vector<double> probs;

    const Tensor& pool3() const { return pool[2].output; }
};

struct ForwardTrace {
    Architecture arch;
    Mode mode = Mode::Eval;
    double keep_prob = 1.0;
    std::vector<SampleTrace> samples;
};

struct ForwardResult {
    std::vector<std::vector<double>> logits;
    std::vector<std::vector<double>> probs;
    ForwardTrace trace;
};

namespace detail {

inline std::vector<double> softmax(const std::vector<double>& z) {
    const double mx = *std::max_element(z.begin(), z.end());
    std::vector<double> p(z.size());
    double s = 0;
    for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
    for (auto& v : p) v /= s;
    return p;
}

inline void check_input(const CnnModel& m, const Tensor& x) {
    if (x.height != m.arch.input_side || x.width != m.arch.input_side || x.channels != m.arch.channels)
        fail(ErrorKind::ShapeMismatch, "input " + std::to_string(x.height) + "x" + std::to_string(x.width) + "x" +
                                           std::to_string(x.channels) + " does not match model " +
                                           std::to_string(m.arch.input_side) + "x" +
                                           std::to_string(m.arch.input_side) + "x" + std::to_string(m.arch.channels));
}

inline void conv_stack(const CnnModel& m, const Tensor& x, SampleTrace& t) {
    check_input(m, x);
    const ParamLayout L = m.layout();
    const Tensor* in = &x;
    for (std::size_t k = 0; k < 3; ++k) {
        t.conv[k] = conv2d_valid(*in, m.block(L.conv_w[k]), m.block(L.conv_b[k]));
        relu_inplace(t.conv[k]);
        t.pool[k] = maxpool2(t.conv[k]);
        in = &t.pool[k].output;
    }
}

// Dense head for a batch of traces whose conv stacks are filled in. Dropout
// masks are drawn sample by sample, unit by unit.
inline void dense_head(const CnnModel& m, std::span<SampleTrace> ts, Mode mode, double keep_prob, std::mt19937_64& rng) {
    const ParamLayout L = m.layout();
    const int F = m.arch.flat_size(), H = m.arch.hidden, K = m.arch.n_classes;
    const auto B = static_cast<Eigen::Index>(ts.size());
    Eigen::MatrixXd flat(F, B);
    for (Eigen::Index i = 0; i < B; ++i) flat.col(i) = CMapVec(ts[static_cast<std::size_t>(i)].pool[2].output.data.data(), F);
    Eigen::MatrixXd pre = CMapMat(m.block(L.fc1_w).data(), F, H).transpose() * flat;
    pre.colwise() += CMapVec(m.block(L.fc1_b).data(), H);
    std::bernoulli_distribution keep(keep_prob);
    for (Eigen::Index i = 0; i < B; ++i) {
        SampleTrace& t = ts[static_cast<std::size_t>(i)];
        t.hidden_pre.assign(pre.col(i).data(), pre.col(i).data() + H);
        t.mask.assign(static_cast<std::size_t>(H), 1.0);
        t.hidden.resize(static_cast<std::size_t>(H));
        for (std::size_t j = 0; j < t.hidden.size(); ++j) {
            const double a = t.hidden_pre[j] > 0 ? t.hidden_pre[j] : 0.0;
            if (mode == Mode::Train && keep_prob < 1.0) {
                t.mask[j] = keep(rng) ? 1.0 : 0.0;
                t.hidden[j] = a * t.mask[j] / keep_prob;
            } else {
                t.hidden[j] = a;
            }
        }
        t.logits.resize(static_cast<std::size_t>(K));
        MapVec(t.logits.data(), K).noalias() =
            CMapMat(m.block(L.fc2_w).data(), H, K).transpose() * CMapVec(t.hidden.data(), H);
        MapVec(t.logits.data(), K) += CMapVec(m.block(L.fc2_b).data(), K);
        t.probs = softmax(t.logits);
    }
}

inline SampleTrace forward_one(const CnnModel& m, const Tensor& x, Mode mode, double keep_prob, std::mt19937_64& rng) {
    SampleTrace t;
    conv_stack(m, x, t);
    dense_head(m, std::span<SampleTrace>(&t, 1), mode, keep_prob, rng);
    return t;
}

} // namespace detail

/// Forward pass over a batch. In train mode dropout masks are drawn from
/// `seed`; eval mode is deterministic and ignores it.
inline ForwardResult forward(const CnnModel& m, std::span<const Tensor* const> batch, Mode mode, double keep_prob,
                             std::uint64_t seed) {
    ForwardResult r;
    r.trace.arch = m.arch;
    r.trace.mode = mode;
    r.trace.keep_prob = mode == Mode::Train ? keep_prob : 1.0;
    std::mt19937_64 rng(seed);
    r.trace.samples.resize(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) detail::conv_stack(m, *batch[i], r.trace.samples[i]);
    detail::dense_head(m, r.trace.samples, mode, keep_prob, rng);
    for (const auto& t : r.trace.samples) {
        r.logits.push_back(t.logits);
        r.probs.push_back(t.probs);
    }
    return r;
}

inline ForwardResult forward(const CnnModel& m, const std::vector<Tensor>& batch, Mode mode, double keep_prob,
                             std::uint64_t seed) {
    std::vector<const Tensor*> ptrs;
    for (const auto& x : batch) ptrs.push_back(&x);
    return forward(m, ptrs, mode, keep_prob, seed);
}

/// L2 penalty on both dense weight matrices.
inline double l2_penalty(const CnnModel& m, double beta) {
    const ParamLayout L = m.layout();
    double s = 0;
    for (auto b : {L.fc1_w, L.fc2_w})
        for (double w : m.block(b)) s += w * w;
    return beta * s;
}

struct LossGrad {
    double loss = 0;
    std::vector<double> grads; // aligned with CnnModel::params
};

/// Mean cross-entropy plus beta * (|W_fc1|^2 + |W_fc2|^2) and its exact
/// gradient, back-propagated through the recorded trace.
inline LossGrad loss_and_gradients(const CnnModel& m, std::span<const Tensor* const> batch,
                                   std::span<const int> labels, const ForwardTrace& trace, double beta_l2) {
    if (trace.samples.size() != batch.size() || labels.size() != batch.size() || !(trace.arch == m.arch))
        fail(ErrorKind::TraceMismatch, "trace does not belong to this batch/model");
    const ParamLayout L = m.layout();
    const int F = m.arch.flat_size(), H = m.arch.hidden, K = m.arch.n_classes;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    LossGrad out;
    out.grads.assign(m.params.size(), 0.0);
    auto g = [&](const ParamLayout::Block& b) { return std::span<double>(out.grads.data() + b.offset, b.size); };
    const auto sides = m.arch.sides();

    const auto B = static_cast<Eigen::Index>(batch.size());
    Eigen::MatrixXd dH(H, B), flat(F, B);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const SampleTrace& t = trace.samples[i];
        const int y = labels[i];
        if (y < 0 || y >= K) fail(ErrorKind::TraceMismatch, "label " + std::to_string(y) + " out of range");
        out.loss -= std::log(std::max(t.probs[static_cast<std::size_t>(y)], std::numeric_limits<double>::min())) * inv_b;

        std::vector<double> dlogits(t.probs);
        dlogits[static_cast<std::size_t>(y)] -= 1.0;
        for (auto& v : dlogits) v *= inv_b;

        detail::MapMat(g(L.fc2_w).data(), H, K).noalias() +=
            detail::CMapVec(t.hidden.data(), H) * detail::CMapRow(dlogits.data(), K);
        detail::MapVec(g(L.fc2_b).data(), K) += detail::CMapVec(dlogits.data(), K);

        Eigen::VectorXd dh = detail::CMapMat(m.block(L.fc2_w).data(), H, K) * detail::CMapVec(dlogits.data(), K);
        for (int j = 0; j < H; ++j) {
            const auto ju = static_cast<std::size_t>(j);
            dh[j] = t.hidden_pre[ju] > 0 ? dh[j] * t.mask[ju] / trace.keep_prob : 0.0;
        }
        const auto ie = static_cast<Eigen::Index>(i);
        dH.col(ie) = dh;
        flat.col(ie) = detail::CMapVec(t.pool[2].output.data.data(), F);
    }
    detail::MapMat(g(L.fc1_w).data(), F, H).noalias() += flat * dH.transpose();
    detail::MapVec(g(L.fc1_b).data(), H) += dH.rowwise().sum();
    const Eigen::MatrixXd dflat = detail::CMapMat(m.block(L.fc1_w).data(), F, H) * dH;

    for (std::size_t i = 0; i < batch.size(); ++i) {
        const SampleTrace& t = trace.samples[i];
        Tensor grad(sides[6], sides[6], m.arch.filters[2]);
        detail::MapVec(grad.data.data(), F) = dflat.col(static_cast<Eigen::Index>(i));
        for (int k = 2; k >= 0; --k) {
            const auto ku = static_cast<std::size_t>(k);
            const Tensor& conv_out = t.conv[ku];
            Tensor dconv = maxpool2_backward(t.pool[ku], grad, conv_out.height, conv_out.width);
            for (std::size_t e = 0; e < dconv.data.size(); ++e)
                if (conv_out.data[e] <= 0) dconv.data[e] = 0.0;
            const Tensor& conv_in = k == 0 ? *batch[i] : t.pool[ku - 1].output;
            grad = conv2d_valid_backward(conv_in, dconv, m.block(L.conv_w[ku]), g(L.conv_w[ku]), g(L.conv_b[ku]), k > 0);
        }
    }

    out.loss += l2_penalty(m, beta_l2);
    for (auto b : {L.fc1_w, L.fc2_w}) {
        auto gw = g(b);
        auto w = m.block(b);
        for (std::size_t j = 0; j < b.size; ++j) gw[j] += 2.0 * beta_l2 * w[j];
    }
    return out;
}

// ------------------------------------------------------------------ Adam

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m, v;
    std::uint64_t t = 0;
    bool operator==(const AdamState&) const = default;
};

/// One bias-corrected Adam step; advances state.t before updating.
inline void adam_update(std::span<double> params, std::span<const double> grads, AdamState& s, const AdamConfig& c) {
    if (s.m.size() != params.size()) s.m.assign(params.size(), 0.0);
    if (s.v.size() != params.size()) s.v.assign(params.size(), 0.0);
    ++s.t;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * grads[i];
        s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
        const double mhat = s.m[i] / bc1, vhat = s.v[i] / bc2;
        params[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
    }
}

// -------------------------------------------------------------- training

struct TrainConfig {
    double lr = 0.001;
    double beta_l2 = 0.01;
    double keep_prob = 0.75;
    int batch_size = 29;
    int max_epochs = 300;
    int patience = 10;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;

    AdamConfig adam() const { return {lr, adam_beta1, adam_beta2, adam_eps}; }
};

struct LabeledSet {
    std::vector<const Tensor*> images;
    std::vector<int> labels;
    std::size_t size() const { return images.size(); }
};

struct EpochStats {
    double train_loss = 0;
    double val_loss = 0;
    double val_accuracy = 0;
};

struct TrainResult {
    CnnModel model;
    AdamState adam;
    std::vector<EpochStats> history;
    int best_epoch = -1; // index into history, -1 when no epoch ran
};

/// Eval-mode class probabilities, one row per image.
inline std::vector<std::vector<double>> predict(const CnnModel& m, std::span<const Tensor* const> images) {
    std::vector<std::vector<double>> out;
    out.reserve(images.size());
    constexpr std::size_t chunk = 32;
    for (std::size_t start = 0; start < images.size(); start += chunk) {
        const auto n = std::min(chunk, images.size() - start);
        auto r = forward(m, images.subspan(start, n), Mode::Eval, 1.0, 0);
        for (auto& p : r.probs) out.push_back(std::move(p));
    }
    return out;
}

inline std::vector<std::vector<double>> predict(const CnnModel& m, const std::vector<Tensor>& images) {
    std::vector<const Tensor*> ptrs;
    for (const auto& x : images) ptrs.push_back(&x);
    return predict(m, ptrs);
}

/// Eval-mode Pool3 maps of one image.
inline Tensor pool3_maps(const CnnModel& m, const Tensor& x) {
    SampleTrace t;
    detail::conv_stack(m, x, t);
    return std::move(t.pool[2].output);
}

inline std::pair<double, double> evaluate_loss_accuracy(const CnnModel& m, const LabeledSet& set) {
    auto probs = predict(m, set.images);
    double loss = 0;
    int correct = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const auto& p = probs[i];
        const auto y = static_cast<std::size_t>(set.labels[i]);
        loss -= std::log(std::max(p[y], std::numeric_limits<double>::min()));
        if (static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == y) ++correct;
    }
    const double n = static_cast<double>(set.size());
    return {loss / n, correct / n};
}

/// Mini-batch Adam with per-epoch seeded shuffling. After each epoch the
/// validation cross-entropy is measured; training stops once it has not
/// improved for `patience` epochs, returning the best-epoch parameters.
inline TrainResult train(const CnnModel& init, const LabeledSet& train_set, const LabeledSet& val_set,
                         const TrainConfig& cfg) {
    if (train_set.size() == 0) fail(ErrorKind::EmptyTrainingSet, "no training samples");
    if (val_set.size() == 0) fail(ErrorKind::EmptyTrainingSet, "no validation samples");
    if (!(cfg.keep_prob > 0 && cfg.keep_prob <= 1)) fail(ErrorKind::OutOfRange, "keep_prob must be in (0,1]");
    if (cfg.patience < 1 || cfg.batch_size < 1) fail(ErrorKind::OutOfRange, "patience and batch size must be >= 1");

    TrainResult res{init, {}, {}, -1};
    CnnModel current = init;
    AdamState adam;
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::uint64_t step = 0;
    std::vector<std::size_t> order(train_set.size());

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double epoch_loss = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<const Tensor*> xb;
            std::vector<int> yb;
            for (std::size_t i = start; i < end; ++i) {
                xb.push_back(train_set.images[order[i]]);
                yb.push_back(train_set.labels[order[i]]);
            }
            auto fwd = forward(current, xb, Mode::Train, cfg.keep_prob, derive_seed(cfg.seed, "dropout", step++));
            auto lg = loss_and_gradients(current, xb, yb, fwd.trace, cfg.beta_l2);
            epoch_loss += lg.loss * static_cast<double>(end - start);
            adam_update(current.params, lg.grads, adam, cfg.adam());
        }
        auto [vl, va] = evaluate_loss_accuracy(current, val_set);
        res.history.push_back({epoch_loss / static_cast<double>(order.size()), vl, va});
        if (vl < best) {
            best = vl;
            since_best = 0;
            res.model = current;
            res.adam = adam;
            res.best_epoch = epoch;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    return res;
}

// ------------------------------------------------------------ checkpoint

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const CnnModel& m, const AdamState& adam) {
    io::BinaryWriter w;
    w.magic("OMCK");
    w.u32(kCheckpointVersion);
    for (int v : {m.arch.input_side, m.arch.channels, m.arch.n_classes, m.arch.filters[0], m.arch.filters[1],
                  m.arch.filters[2], m.arch.hidden})
        w.u32(static_cast<std::uint32_t>(v));
    w.u64(m.params.size());
    for (double p : m.params) w.f64(p);
    w.u64(adam.t);
    const bool has_moments = adam.m.size() == m.params.size() && adam.v.size() == m.params.size();
    w.u32(has_moments ? 1 : 0);
    if (has_moments) {
        for (double x : adam.m) w.f64(x);
        for (double x : adam.v) w.f64(x);
    }
    std::string bytes = w.bytes();
    io::BinaryWriter crc;
    crc.u32(io::crc32_of(bytes));
    return bytes + crc.bytes();
}

inline std::pair<CnnModel, AdamState> decode_checkpoint(std::string_view bytes) {
    if (bytes.size() < 12 || bytes.substr(0, 4) != "OMCK") fail(ErrorKind::ChecksumMismatch, "not a checkpoint");
    const auto body = bytes.substr(0, bytes.size() - 4);
    io::BinaryReader tail(bytes.substr(bytes.size() - 4));
    if (tail.u32() != io::crc32_of(body)) fail(ErrorKind::ChecksumMismatch, "checkpoint CRC mismatch");
    io::BinaryReader r(body, ErrorKind::ChecksumMismatch);
    r.magic(4);
    if (auto v = r.u32(); v != kCheckpointVersion)
        fail(ErrorKind::VersionMismatch, "checkpoint version " + std::to_string(v));
    Architecture a;
    a.input_side = static_cast<int>(r.u32());
    a.channels = static_cast<int>(r.u32());
    a.n_classes = static_cast<int>(r.u32());
    for (auto& f : a.filters) f = static_cast<int>(r.u32());
    a.hidden = static_cast<int>(r.u32());
    CnnModel m(a);
    if (r.u64() != m.params.size()) fail(ErrorKind::ChecksumMismatch, "parameter count does not match architecture");
    for (auto& p : m.params) p = r.f64();
    AdamState s;
    s.t = r.u64();
    if (r.u32() == 1) {
        s.m.resize(m.params.size());
        s.v.resize(m.params.size());
        for (auto& x : s.m) x = r.f64();
        for (auto& x : s.v) x = r.f64();
    }
    if (r.remaining() != 0) fail(ErrorKind::ChecksumMismatch, "trailing bytes in checkpoint");
    return {std::move(m), std::move(s)};
}

inline void checkpoint_save(const CnnModel& m, const AdamState& adam, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_checkpoint(m, adam));
}

inline std::pair<CnnModel, AdamState> checkpoint_load(const std::filesystem::path& path) {
    return decode_checkpoint(io::read_file(path));
}

} // namespace omicsmap
