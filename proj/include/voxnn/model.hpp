#pragma once

#include <cmath>
#include <cstring>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "voxnn/fusion.hpp"
#include "voxnn/nn.hpp"

namespace voxnn {

inline constexpr double kConvDropout = 0.02;
inline constexpr double kDenseDropout = 0.5;

// Network family: four conv blocks of two 3x3x3 valid layers each, then two
// unit-kernel dense layers and a classifier. Baseline runs all modalities
// through one stream; fused variants run one stream per modality up to the
// fusion point and share a trunk after it.
struct ArchitectureSpec {
    std::optional<FusionSpec> fusion;  // nullopt = baseline
    int64_t modalities = 4;
    std::vector<int64_t> block_channels = {30, 30, 40, 40, 40, 40, 50, 50};
    std::vector<int64_t> dense_channels = {150, 150};
    int64_t classes = 5;
    int64_t input_patch = 25;
    int64_t output_patch = 9;

    static ArchitectureSpec baseline() { return {}; }

    static ArchitectureSpec fused(FusionPoint p, FusionFn f) {
        ArchitectureSpec s;
        s.fusion = FusionSpec{p, f};
        return s;
    }

    // Narrow widths for gradient checks and smoke training.
    ArchitectureSpec with_tiny_channels() const {
        ArchitectureSpec s = *this;
        s.block_channels = {2, 2, 3, 3, 3, 3, 4, 4};
        s.dense_channels = {5, 5};
        return s;
    }

    int64_t blocks() const { return static_cast<int64_t>(block_channels.size()) / 2; }

    // 1-based index of the block whose output is fused
    int64_t fusion_block() const {
        if (!fusion) throw ConfigError("baseline architecture has no fusion point");
        switch (fusion->point) {
            case FusionPoint::early: return 1;
            case FusionPoint::middle: return 2;
            default: return blocks();
        }
    }

    int64_t fusion_channels() const { return block_channels[2 * fusion_block() - 1]; }

    int64_t extent_after_block(int64_t b) const { return input_patch - 4 * b; }

    std::string variant_name() const {
        return fusion ? to_string(fusion->point) + "-" + to_string(fusion->fn) : "baseline";
    }

    void validate() const {
        if (modalities < 1) throw ConfigError("modalities must be positive");
        if (fusion && modalities < 2)
            throw ConfigError("fused variants need at least 2 modalities, got " +
                              std::to_string(modalities));
        if (block_channels.size() != 8)
            throw ConfigError("expected 8 conv layer widths (4 blocks of 2), got " +
                              std::to_string(block_channels.size()));
        if (dense_channels.size() != 2)
            throw ConfigError("expected 2 dense layer widths, got " +
                              std::to_string(dense_channels.size()));
        for (const int64_t c : block_channels)
            if (c < 1) throw ConfigError("conv channel counts must be positive");
        for (const int64_t c : dense_channels)
            if (c < 1) throw ConfigError("dense channel counts must be positive");
        if (classes < 2) throw ConfigError("need at least 2 classes");
        if (extent_after_block(blocks()) != output_patch)
            throw ConfigError("conv chain maps input " + std::to_string(input_patch) + " to " +
                              std::to_string(extent_after_block(blocks())) +
                              ", expected output patch " + std::to_string(output_patch));
    }

    bool operator==(const ArchitectureSpec&) const = default;
};

// Seed-replayed inverted dropout. One bernoulli draw per element in flat
// order, so the same (seed, shape, rate) reproduces the mask exactly; the
// mask is a linear scale, so this one function serves forward and backward.
template <typename T>
Tensor<T> dropout_apply(const Tensor<T>& x, double rate, uint64_t seed) {
    Rng rng(seed);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = rng.bernoulli(rate) ? T(0) : keep * x[i];
    return y;
}

template <typename T>
void accumulate(Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "accumulate");
    for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

template <typename T>
class Network {
public:
    struct Param {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        bool is_weight;  // fan-in initialized and regularized; biases are not
    };

    Network(ArchitectureSpec spec, uint64_t seed) : spec_(std::move(spec)) {
        spec_.validate();
        build_units();
        init_params(seed);
    }

    const ArchitectureSpec& spec() const { return spec_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    int find_param(std::string_view name) const {
        for (size_t i = 0; i < params_.size(); ++i)
            if (params_[i].name == name) return static_cast<int>(i);
        return -1;
    }

    Param& param(std::string_view name) {
        const int i = find_param(name);
        if (i < 0) throw ConfigError("no parameter named '" + std::string(name) + "'");
        return params_[static_cast<size_t>(i)];
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    struct LayerCount {
        std::string layer;
        int64_t weights = 0;
        int64_t biases = 0;
        int64_t total = 0;
    };

    std::vector<LayerCount> parameter_table() const {
        std::vector<LayerCount> rows;
        for (const auto& p : params_) {
            const std::string layer = p.name.substr(0, p.name.rfind('/'));
            if (rows.empty() || rows.back().layer != layer) rows.push_back({layer, 0, 0, 0});
            auto& r = rows.back();
            (p.is_weight ? r.weights : r.biases) += p.value.numel();
            r.total += p.value.numel();
        }
        return rows;
    }

    Shape fusion_input_shape() const {
        const int64_t e = spec_.extent_after_block(spec_.fusion_block());
        return Shape{spec_.modalities, spec_.fusion_channels(), e, e, e};
    }

    // post-dropout output shape of each conv block along one stream (or the
    // baseline trunk)
    std::vector<Shape> block_output_shapes() const {
        std::vector<Shape> out;
        for (int64_t b = 1; b <= spec_.blocks(); ++b) {
            const int64_t e = spec_.extent_after_block(b);
            out.push_back(Shape{spec_.block_channels[2 * b - 1], e, e, e});
        }
        return out;
    }

    // every unit's output shape derived from the built kernels
    std::vector<std::pair<std::string, Shape>> unit_output_shapes() const {
        std::vector<std::pair<std::string, Shape>> rows;
        const int64_t p = spec_.input_patch;
        const bool fused = spec_.fusion.has_value();
        auto walk = [&](size_t first, size_t count, Shape in) {
            for (size_t u = 0; u < count; ++u) {
                const Unit& un = units_[first + u];
                const Shape& w = params_[un.w].value.shape();
                const int64_t k = w[2];
                in = Shape{w[0], in[1] - k + 1, in[2] - k + 1, in[3] - k + 1};
                rows.emplace_back(un.layer, in);
            }
            return in;
        };
        if (fused) {
            Shape tail{1, p, p, p};
            for (int64_t s = 0; s < spec_.modalities; ++s)
                tail = walk(static_cast<size_t>(s) * stream_units_, stream_units_,
                            Shape{1, p, p, p});
            rows.emplace_back("fusion", tail);
            walk(trunk_first_, units_.size() - trunk_first_, tail);
        } else {
            walk(0, units_.size(), Shape{spec_.modalities, p, p, p});
        }
        return rows;
    }

    // batch (B, modalities, P, P, P) -> logits (B, classes, O, O, O).
    // Train mode records per-sample tapes for one matching backward; eval
    // mode is deterministic and keeps nothing.
    Tensor<T> forward(const Tensor<T>& batch, Mode mode, uint64_t dropout_seed = 0) {
        check_batch(batch);
        const int64_t bsz = batch.extent(0);
        const bool fused = spec_.fusion.has_value();
        const int64_t n_streams = spec_.modalities;
        const auto kers = make_kernels();
        std::optional<ConvKernel<T>> fuse_ker;
        if (fusion_w_ >= 0)
            fuse_ker.emplace(params_[static_cast<size_t>(fusion_w_)].value,
                             params_[static_cast<size_t>(fusion_b_)].value);

        const int64_t o = spec_.output_patch;
        Tensor<T> logits(Shape{bsz, spec_.classes, o, o, o});
        const int64_t logit_sz = spec_.classes * o * o * o;
        const int64_t sample_sz = batch.numel() / bsz;
        const bool train = mode == Mode::train;

        ctx_.reset();
        if (train) {
            ctx_.emplace();
            ctx_->samples.resize(static_cast<size_t>(bsz));
            ctx_->batch_shape = batch.shape();
            ctx_->dropout_seed = dropout_seed;
        }

        for (int64_t s = 0; s < bsz; ++s) {
            Tensor<T> x(Shape{spec_.modalities, spec_.input_patch, spec_.input_patch,
                              spec_.input_patch});
            std::memcpy(x.data(), batch.data() + s * sample_sz,
                        static_cast<size_t>(sample_sz) * sizeof(T));
            SampleCtx* sc = train ? &ctx_->samples[static_cast<size_t>(s)] : nullptr;
            const uint64_t sample_seed = Rng::mix(dropout_seed, static_cast<uint64_t>(s));

            Tensor<T> h;
            if (fused) {
                Tensor<T> stacked(fusion_input_shape());
                const int64_t m = stacked.numel() / n_streams;
                if (sc) sc->streams.resize(static_cast<size_t>(n_streams));
                for (int64_t st = 0; st < n_streams; ++st) {
                    SegTape* tape = sc ? &sc->streams[static_cast<size_t>(st)] : nullptr;
                    Tensor<T> out =
                        seg_forward(kers, static_cast<size_t>(st) * stream_units_, stream_units_,
                                    slice_channels(x, st, st + 1), mode, sample_seed, tape);
                    std::memcpy(stacked.data() + st * m, out.data(),
                                static_cast<size_t>(m) * sizeof(T));
                }
                switch (spec_.fusion->fn) {
                    case FusionFn::max: {
                        MaxFused<T> r = fuse_max(stacked);
                        h = std::move(r.out);
                        if (sc) sc->argmax = std::move(r.argmax);
                        break;
                    }
                    case FusionFn::sum:
                        h = fuse_sum(stacked);
                        break;
                    case FusionFn::conv:
                        h = fuse_conv(stacked, *fuse_ker);
                        break;
                }
                if (sc) sc->stacked = std::move(stacked);
            } else {
                h = std::move(x);
            }
            Tensor<T> out = seg_forward(kers, trunk_first_, units_.size() - trunk_first_,
                                        std::move(h), mode, sample_seed,
                                        sc ? &sc->trunk : nullptr);
            std::memcpy(logits.data() + s * logit_sz, out.data(),
                        static_cast<size_t>(logit_sz) * sizeof(T));
        }
        return logits;
    }

    // Accumulates exact gradients of the cotangent into the registry grad
    // buffers (overwriting the previous batch), consuming the tapes of the
    // matching train-mode forward. Samples reduce in ascending order.
    void backward(const Tensor<T>& grad_logits) {
        if (!ctx_) throw StateError("backward without a pending train-mode forward");
        const int64_t bsz = ctx_->batch_shape[0];
        const int64_t o = spec_.output_patch;
        const Shape want{bsz, spec_.classes, o, o, o};
        if (grad_logits.shape() != want)
            throw ShapeError("backward cotangent " + grad_logits.shape().str() +
                             " does not match logits " + want.str());

        zero_grads();
        const bool fused = spec_.fusion.has_value();
        const int64_t n_streams = spec_.modalities;
        const auto kers = make_kernels();
        std::optional<ConvKernel<T>> fuse_ker;
        if (fusion_w_ >= 0)
            fuse_ker.emplace(params_[static_cast<size_t>(fusion_w_)].value,
                             params_[static_cast<size_t>(fusion_b_)].value);
        const int64_t logit_sz = spec_.classes * o * o * o;

        for (int64_t s = 0; s < bsz; ++s) {
            SampleCtx& sc = ctx_->samples[static_cast<size_t>(s)];
            const uint64_t sample_seed = Rng::mix(ctx_->dropout_seed, static_cast<uint64_t>(s));
            Tensor<T> g(Shape{spec_.classes, o, o, o});
            std::memcpy(g.data(), grad_logits.data() + s * logit_sz,
                        static_cast<size_t>(logit_sz) * sizeof(T));
            g = seg_backward(kers, trunk_first_, units_.size() - trunk_first_, sc.trunk,
                             std::move(g), sample_seed);
            if (fused) {
                Tensor<T> gs;
                switch (spec_.fusion->fn) {
                    case FusionFn::max:
                        gs = fuse_max_backward(sc.argmax, g, n_streams);
                        break;
                    case FusionFn::sum:
                        gs = fuse_sum_backward(g, n_streams);
                        break;
                    case FusionFn::conv: {
                        ConvFusionGrads<T> r = fuse_conv_backward(sc.stacked, *fuse_ker, g);
                        accumulate(params_[static_cast<size_t>(fusion_w_)].grad, r.weights);
                        accumulate(params_[static_cast<size_t>(fusion_b_)].grad, r.bias);
                        gs = std::move(r.streams);
                        break;
                    }
                }
                const int64_t m = gs.numel() / n_streams;
                const Shape ss{gs.extent(1), gs.extent(2), gs.extent(3), gs.extent(4)};
                for (int64_t st = 0; st < n_streams; ++st) {
                    Tensor<T> gst(ss);
                    std::memcpy(gst.data(), gs.data() + st * m,
                                static_cast<size_t>(m) * sizeof(T));
                    seg_backward(kers, static_cast<size_t>(st) * stream_units_, stream_units_,
                                 sc.streams[static_cast<size_t>(st)], std::move(gst),
                                 sample_seed);
                }
            }
            sc = SampleCtx{};  // release this sample's tape
        }
        ctx_.reset();
    }

    void zero_grads() {
        for (auto& p : params_) p.grad.fill(T(0));
    }

    // lambda1*sign(w) + lambda2*w added to weight gradients; biases excluded.
    RegPenalty apply_regularization(double lambda1, double lambda2) {
        RegPenalty total;
        for (auto& p : params_) {
            if (!p.is_weight) continue;
            const RegPenalty r = l1_l2_accumulate(p.value, p.grad, lambda1, lambda2);
            total.l1 += r.l1;
            total.l2 += r.l2;
        }
        return total;
    }

private:
    struct Unit {
        std::string layer;
        int w, b;
        bool relu;
        double dropout;
        int drop_id;
    };

    struct SegTape {
        Tensor<T> input;
        std::vector<Tensor<T>> act;  // pre-dropout activation, only where needed
        std::vector<Tensor<T>> out;  // unit outputs
    };

    struct SampleCtx {
        std::vector<SegTape> streams;
        SegTape trunk;
        Tensor<T> stacked;
        std::vector<uint8_t> argmax;
    };

    struct BatchCtx {
        std::vector<SampleCtx> samples;
        Shape batch_shape;
        uint64_t dropout_seed = 0;
    };

    int add_param(std::string name, Shape shape, bool is_weight) {
        params_.push_back({std::move(name), Tensor<T>(shape), Tensor<T>(shape), is_weight});
        return static_cast<int>(params_.size()) - 1;
    }

    void build_units() {
        const bool fused = spec_.fusion.has_value();
        int drop_id = 0;

        auto add_unit = [&](const std::string& prefix, const std::string& layer, int64_t cin,
                            int64_t cout, int64_t k, bool relu, double rate) {
            Unit u;
            u.layer = prefix + layer;
            u.w = add_param(u.layer + "/w", Shape{cout, cin, k, k, k}, true);
            u.b = add_param(u.layer + "/b", Shape{cout}, false);
            u.relu = relu;
            u.dropout = rate;
            u.drop_id = rate > 0 ? drop_id++ : -1;
            units_.push_back(std::move(u));
        };

        auto add_blocks = [&](const std::string& prefix, int64_t first_block, int64_t last_block,
                              int64_t cin) {
            int64_t c = cin;
            for (int64_t b = first_block; b <= last_block; ++b)
                for (int64_t j = 1; j <= 2; ++j) {
                    const int64_t cout = spec_.block_channels[static_cast<size_t>(2 * (b - 1) + j - 1)];
                    add_unit(prefix, "conv" + std::to_string(b) + "-" + std::to_string(j), c,
                             cout, 3, true, j == 2 ? kConvDropout : 0.0);
                    c = cout;
                }
            return c;
        };

        auto add_head = [&](int64_t cin) {
            int64_t c = cin;
            for (size_t d = 0; d < spec_.dense_channels.size(); ++d) {
                add_unit("trunk/", "dense" + std::to_string(d + 1), c, spec_.dense_channels[d],
                         1, true, kDenseDropout);
                c = spec_.dense_channels[d];
            }
            add_unit("trunk/", "classifier", c, spec_.classes, 1, false, 0.0);
        };

        if (fused) {
            const int64_t fuse_b = spec_.fusion_block();
            // Streams share drop ids position-for-position, so identical
            // streams see identical masks and stay interchangeable.
            int stream_drop_end = 0;
            for (int64_t s = 0; s < spec_.modalities; ++s) {
                drop_id = 0;
                const size_t start = units_.size();
                add_blocks("stream" + std::to_string(s) + "/", 1, fuse_b, 1);
                if (s == 0) {
                    stream_units_ = units_.size() - start;
                    stream_drop_end = drop_id;
                }
            }
            drop_id = stream_drop_end;
            if (spec_.fusion->fn == FusionFn::conv) {
                const int64_t c = spec_.fusion_channels();
                fusion_w_ = add_param("fusion/w", Shape{c, spec_.modalities * c, 1, 1, 1}, true);
                fusion_b_ = add_param("fusion/b", Shape{c}, false);
            }
            trunk_first_ = units_.size();
            int64_t c = spec_.fusion_channels();
            if (fuse_b < spec_.blocks()) c = add_blocks("trunk/", fuse_b + 1, spec_.blocks(), c);
            add_head(c);
        } else {
            stream_units_ = 0;
            trunk_first_ = 0;
            add_head(add_blocks("trunk/", 1, spec_.blocks(), spec_.modalities));
        }
    }

    // Weights: uniform in +/- 1/sqrt(fan-in), drawn in registry order from
    // the named init stream. The conv fusion kernel instead starts at the
    // stream average plus +/- 0.01 noise. Biases stay zero.
    void init_params(uint64_t seed) {
        Rng rng(Rng::stream(seed, "init"));
        for (size_t i = 0; i < params_.size(); ++i) {
            Param& p = params_[i];
            if (!p.is_weight) continue;
            if (static_cast<int>(i) == fusion_w_) {
                const ConvKernel<T> base = fusion_identity_kernel<T>(
                    spec_.modalities, spec_.fusion_channels(), T(1) / static_cast<T>(spec_.modalities));
                for (int64_t j = 0; j < p.value.numel(); ++j)
                    p.value[j] = base.weights[j] + static_cast<T>(rng.uniform(-0.01, 0.01));
            } else {
                const Shape& s = p.value.shape();
                const double bound = 1.0 / std::sqrt(static_cast<double>(s[1] * s[2] * s[3] * s[4]));
                for (int64_t j = 0; j < p.value.numel(); ++j)
                    p.value[j] = static_cast<T>(rng.uniform(-bound, bound));
            }
        }
    }

    void check_batch(const Tensor<T>& batch) const {
        const int64_t p = spec_.input_patch;
        if (batch.rank() != 5 || batch.extent(1) != spec_.modalities || batch.extent(2) != p ||
            batch.extent(3) != p || batch.extent(4) != p)
            throw ShapeError("batch must be (B, " + std::to_string(spec_.modalities) + ", " +
                             std::to_string(p) + ", " + std::to_string(p) + ", " +
                             std::to_string(p) + "), got " + batch.shape().str());
    }

    std::vector<ConvKernel<T>> make_kernels() const {
        std::vector<ConvKernel<T>> kers;
        kers.reserve(units_.size());
        for (const Unit& u : units_)
            kers.emplace_back(params_[static_cast<size_t>(u.w)].value,
                              params_[static_cast<size_t>(u.b)].value);
        return kers;
    }

    Tensor<T> seg_forward(const std::vector<ConvKernel<T>>& kers, size_t first, size_t count,
                          Tensor<T> x, Mode mode, uint64_t sample_seed, SegTape* tape) {
        if (!tape) {
            for (size_t u = 0; u < count; ++u) {
                const Unit& un = units_[first + u];
                Tensor<T> z = conv3d(x, kers[first + u]);
                x = un.relu ? relu_forward(z) : std::move(z);
            }
            return x;
        }
        tape->input = std::move(x);
        tape->act.assign(count, Tensor<T>());
        tape->out.assign(count, Tensor<T>());
        const Tensor<T>* in = &tape->input;
        for (size_t u = 0; u < count; ++u) {
            const Unit& un = units_[first + u];
            Tensor<T> z = conv3d(*in, kers[first + u]);
            if (un.relu) z = relu_forward(z);
            if (un.dropout > 0 && mode == Mode::train) {
                tape->act[u] = std::move(z);
                tape->out[u] = dropout_apply(tape->act[u], un.dropout,
                                             Rng::mix(sample_seed, static_cast<uint64_t>(un.drop_id)));
            } else {
                tape->out[u] = std::move(z);
            }
            in = &tape->out[u];
        }
        return tape->out[count - 1];
    }

    Tensor<T> seg_backward(const std::vector<ConvKernel<T>>& kers, size_t first, size_t count,
                           SegTape& tape, Tensor<T> g, uint64_t sample_seed) {
        for (size_t u = count; u-- > 0;) {
            const Unit& un = units_[first + u];
            if (un.dropout > 0)
                g = dropout_apply(g, un.dropout,
                                  Rng::mix(sample_seed, static_cast<uint64_t>(un.drop_id)));
            if (un.relu) {
                const Tensor<T>& a = un.dropout > 0 ? tape.act[u] : tape.out[u];
                g = relu_backward(a, g);  // a > 0 iff the pre-activation was > 0
            }
            const Tensor<T>& in = u == 0 ? tape.input : tape.out[u - 1];
            Conv3dGrads<T> cg = conv3d_backward(in, kers[first + u], g);
            accumulate(params_[static_cast<size_t>(un.w)].grad, cg.weights);
            accumulate(params_[static_cast<size_t>(un.b)].grad, cg.bias);
            g = std::move(cg.input);
        }
        return g;
    }

    ArchitectureSpec spec_;
    std::vector<Param> params_;
    std::vector<Unit> units_;
    size_t stream_units_ = 0;
    size_t trunk_first_ = 0;
    int fusion_w_ = -1;
    int fusion_b_ = -1;
    std::optional<BatchCtx> ctx_;
};

using NetworkF = Network<float>;
using NetworkD = Network<double>;

}  // namespace voxnn
