#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tgfuse/errors.hpp"
#include "tgfuse/imaging.hpp"
#include "tgfuse/rng.hpp"
#include "tgfuse/tape.hpp"
#include "tgfuse/tensor.hpp"
#include "tgfuse/vlf.hpp"

namespace tgfuse {

// Architecture sizes. Spatial resolution is preserved end to end; images are
// reflect-padded to multiples of kPadMultiple before encoding and cropped
// after decoding.
struct NetConfig {
    int64_t channels = 64;               // feature width C
    int64_t heads = 8;                   // attention heads
    int64_t cross_attention_layers = 2;  // M, per branch
    int64_t decoder_blocks = 3;          // N
    int64_t text_dim = 256;              // D
    bool use_text = true;
    int64_t encoder_restormer_blocks = 1;
    int64_t replacement_blocks = 2;  // per branch, used when use_text == false
    bool shared_encoders = false;
    int64_t ffn_expansion = 2;  // gated feed-forward hidden = expansion * C

    void validate() const {
        require(channels >= 1 && heads >= 1, "channels/heads must be positive");
        require(channels % heads == 0, "channels must be divisible by heads");
        require(cross_attention_layers >= 1, "M must be at least 1");
        require(decoder_blocks >= 1, "N must be at least 1");
        require(text_dim >= 8, "text dim must be at least 8");
        require(encoder_restormer_blocks >= 1, "encoder needs at least one block");
        require(ffn_expansion >= 1, "ffn expansion must be positive");
        if (!use_text) require(replacement_blocks >= 1, "no-text variant needs blocks");
    }

    static NetConfig desk_scale() {
        NetConfig cfg;
        cfg.channels = 32;
        return cfg;
    }
};

inline constexpr int64_t kPadMultiple = 4;

// Named parameter tensors with a recorded initialization seed.
template <typename T>
struct ParamSetT {
    uint64_t seed = 0;
    std::vector<std::pair<std::string, TensorT<T>>> tensors;
    std::map<std::string, size_t> index;

    TensorT<T>& at(const std::string& name) {
        auto it = index.find(name);
        require(it != index.end(), "unknown parameter '" + name + "'");
        return tensors[it->second].second;
    }
    const TensorT<T>& at(const std::string& name) const {
        auto it = index.find(name);
        require(it != index.end(), "unknown parameter '" + name + "'");
        return tensors[it->second].second;
    }
    bool has(const std::string& name) const { return index.count(name) != 0; }

    void add(const std::string& name, TensorT<T> t) {
        require(index.find(name) == index.end(), "duplicate parameter '" + name + "'");
        index[name] = tensors.size();
        tensors.emplace_back(name, std::move(t));
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [name, t] : tensors) n += t.numel();
        return n;
    }

    template <typename U>
    ParamSetT<U> cast() const {
        ParamSetT<U> out;
        out.seed = seed;
        for (const auto& [name, t] : tensors) out.add(name, t.template cast<U>());
        return out;
    }
};

using ParamSet = ParamSetT<float>;

// --- Initialization ----------------------------------------------------------

namespace netinit {

template <typename T>
TensorT<T> kaiming_uniform(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    TensorT<T> t(std::move(shape));
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.next_uniform(-bound, bound));
    return t;
}

template <typename T>
TensorT<T> xavier_uniform(int64_t fan_in, int64_t fan_out, Rng& rng) {
    TensorT<T> t({fan_in, fan_out});
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : t.data) v = static_cast<T>(rng.next_uniform(-bound, bound));
    return t;
}

}  // namespace netinit

// Registers every tensor for `cfg` in a fixed order. Convolutions are
// Kaiming-uniform, projection matrices Xavier-uniform, gates and biases zero,
// norm weights and attention temperatures one.
template <typename T>
ParamSetT<T> init_params(const NetConfig& cfg, uint64_t seed) {
    cfg.validate();
    ParamSetT<T> ps;
    ps.seed = seed;
    Rng rng(seed);
    const int64_t C = cfg.channels;
    const int64_t hC = cfg.ffn_expansion * C;

    auto add_conv = [&](const std::string& name, int64_t cout, int64_t cin, int64_t k) {
        ps.add(name + ".w", netinit::kaiming_uniform<T>({cout, cin, k, k}, cin * k * k, rng));
        ps.add(name + ".b", TensorT<T>({cout}));
    };
    auto add_dwconv = [&](const std::string& name, int64_t c, int64_t k) {
        ps.add(name + ".w", netinit::kaiming_uniform<T>({c, 1, k, k}, k * k, rng));
        ps.add(name + ".b", TensorT<T>({c}));
    };
    auto add_proj = [&](const std::string& name, int64_t fin, int64_t fout) {
        ps.add(name + ".w", netinit::xavier_uniform<T>(fin, fout, rng));
        ps.add(name + ".b", TensorT<T>({fout}));
    };
    auto add_ln = [&](const std::string& name) {
        ps.add(name + ".w", TensorT<T>::full({C}, T(1)));
        ps.add(name + ".b", TensorT<T>({C}));
    };
    auto add_ffn = [&](const std::string& prefix) {
        add_conv(prefix + ".in", 2 * hC, C, 1);
        add_dwconv(prefix + ".dw", 2 * hC, 3);
        add_conv(prefix + ".out", C, hC, 1);
    };
    auto add_restormer = [&](const std::string& prefix) {
        add_ln(prefix + ".ln1");
        add_conv(prefix + ".attn.qkv", 3 * C, C, 1);
        add_dwconv(prefix + ".attn.dw", 3 * C, 3);
        ps.add(prefix + ".attn.temp", TensorT<T>::full({cfg.heads}, T(1)));
        add_conv(prefix + ".attn.proj", C, C, 1);
        add_ln(prefix + ".ln2");
        add_ffn(prefix + ".ffn");
    };
    auto add_encoder = [&](const std::string& prefix) {
        add_conv(prefix + ".lift", C, 1, 3);
        for (int64_t i = 0; i < cfg.encoder_restormer_blocks; ++i)
            add_restormer(prefix + ".rb" + std::to_string(i));
        add_conv(prefix + ".res1", C, C, 3);
        add_conv(prefix + ".res2", C, C, 3);
    };
    auto add_cross_attention = [&](const std::string& prefix) {
        add_proj(prefix + ".q", cfg.text_dim, C);
        add_proj(prefix + ".k", C, C);
        add_proj(prefix + ".v", C, C);
        add_proj(prefix + ".scale", C, C);
        add_proj(prefix + ".shift", C, C);
        ps.add(prefix + ".gate", TensorT<T>({1}));  // zero-initialized
        add_ln(prefix + ".ffn_ln");
        add_ffn(prefix + ".ffn");
    };

    add_encoder("enc1");
    if (!cfg.shared_encoders) add_encoder("enc2");
    for (int branch = 1; branch <= 2; ++branch) {
        if (cfg.use_text) {
            for (int64_t m = 0; m < cfg.cross_attention_layers; ++m)
                add_cross_attention("ca" + std::to_string(branch) + "." + std::to_string(m));
        } else {
            for (int64_t r = 0; r < cfg.replacement_blocks; ++r)
                add_restormer("nt" + std::to_string(branch) + "." + std::to_string(r));
        }
    }
    add_conv("fuse", C, 2 * C, 1);
    for (int64_t n = 0; n < cfg.decoder_blocks; ++n)
        add_restormer("dec.rb" + std::to_string(n));
    add_conv("dec.out", 1, C, 3);
    return ps;
}

inline int64_t param_count(const NetConfig& cfg) {
    return init_params<float>(cfg, 0).total_params();
}

// Picks the no-text architecture whose parameter count is closest to the
// text-enabled model's, searching encoder blocks, replacement blocks, and
// decoder blocks. Fails if nothing lands within the given tolerance.
NetConfig plan_no_text_config(const NetConfig& full_cfg, double tolerance = 0.05);

inline NetConfig plan_no_text_config(const NetConfig& full_cfg, double tolerance) {
    require(full_cfg.use_text, "plan_no_text_config expects a text-enabled config");
    const int64_t target = param_count(full_cfg);
    NetConfig best;
    int64_t best_delta = -1;
    for (int64_t enc = 1; enc <= 6; ++enc)
        for (int64_t rep = full_cfg.cross_attention_layers;
             rep <= full_cfg.cross_attention_layers + 3; ++rep)
            for (int64_t dec = full_cfg.decoder_blocks; dec <= full_cfg.decoder_blocks + 3; ++dec) {
                NetConfig cand = full_cfg;
                cand.use_text = false;
                cand.encoder_restormer_blocks = enc;
                cand.replacement_blocks = rep;
                cand.decoder_blocks = dec;
                int64_t delta = std::abs(param_count(cand) - target);
                if (best_delta < 0 || delta < best_delta) {
                    best_delta = delta;
                    best = cand;
                }
            }
    require(static_cast<double>(best_delta) <= tolerance * static_cast<double>(target),
            "no-text parameter parity unattainable within tolerance");
    return best;
}

// --- Forward pass ------------------------------------------------------------

// Collects named intermediate tensors (attention softmax outputs) for tests.
template <typename T>
struct TraceSink {
    std::vector<std::pair<std::string, TensorT<T>>> records;
    void push(const std::string& name, const TensorT<T>& v) { records.emplace_back(name, v); }
};

template <typename T>
class FusionNet {
public:
    // `tape` may be null for eager (inference) evaluation. When `train` is
    // true every parameter leaf requires gradients.
    FusionNet(const NetConfig& cfg, ParamSetT<T>& params, Tape<T>* tape, bool train,
              TraceSink<T>* trace = nullptr)
        : cfg_(cfg), params_(params), tape_(tape), train_(train), trace_(trace) {
        cfg_.validate();
    }

    // img tensors are (1,H,W) with H,W multiples of kPadMultiple and at least 8.
    // `text` is the fused text feature (L,D); required when cfg.use_text.
    Var<T> forward(const TensorT<T>& img1, const TensorT<T>& img2, const TensorT<T>* text,
                   int64_t orig_h, int64_t orig_w) {
        require(img1.shape == img2.shape, "source image size mismatch");
        require(img1.rank() == 3 && img1.shape[0] == 1, "expected (1,H,W) luma tensors");
        require(img1.shape[1] >= 8 && img1.shape[2] >= 8, "network input must be at least 8x8");
        require(img1.shape[1] % kPadMultiple == 0 && img1.shape[2] % kPadMultiple == 0,
                "network input dims must be padded to multiples of 4");
        std::optional<Var<T>> text_var;
        if (cfg_.use_text) {
            require(text != nullptr, "text features required when use_text is set");
            require(text->rank() == 2 && text->shape[1] == cfg_.text_dim,
                    "text feature dim does not match config");
            text_var = lift_const(*text);
        }

        Var<T> f1 = encode(lift_const(img1), "enc1");
        Var<T> f2 = encode(lift_const(img2), cfg_.shared_encoders ? "enc1" : "enc2");
        check_finite(f1, "encoder 1");
        check_finite(f2, "encoder 2");

        if (cfg_.use_text) {
            for (int64_t m = 0; m < cfg_.cross_attention_layers; ++m) {
                f1 = cross_attention(*text_var, f1, "ca1." + std::to_string(m));
                f2 = cross_attention(*text_var, f2, "ca2." + std::to_string(m));
            }
        } else {
            for (int64_t r = 0; r < cfg_.replacement_blocks; ++r) {
                f1 = restormer_block(f1, "nt1." + std::to_string(r));
                f2 = restormer_block(f2, "nt2." + std::to_string(r));
            }
        }

        Var<T> fv = fuse_visual(f1, f2);
        Var<T> out = decode(fv);
        check_finite(out, "decoder");

        // Crop away the reflect padding.
        if (out.val().shape[1] != orig_h) out = slice(out, 1, 0, orig_h);
        if (out.val().shape[2] != orig_w) out = slice(out, 2, 0, orig_w);
        return out;
    }

    // Lookup of a bound parameter leaf (for gradient readout after backward).
    const std::map<std::string, Var<T>>& bound_params() const { return bound_; }

    Var<T> encode(Var<T> x, const std::string& prefix) {
        x = conv2d(x, p(prefix + ".lift.w"), p(prefix + ".lift.b"), 1);
        for (int64_t i = 0; i < cfg_.encoder_restormer_blocks; ++i)
            x = restormer_block(x, prefix + ".rb" + std::to_string(i));
        Var<T> h = conv2d(x, p(prefix + ".res1.w"), p(prefix + ".res1.b"), 1);
        h = conv2d(gelu(h), p(prefix + ".res2.w"), p(prefix + ".res2.b"), 1);
        return add(x, h);
    }

    // Channel-attention transformer block: x + MDTA(LN(x)), then the gated
    // depthwise feed-forward with its own pre-norm residual.
    Var<T> restormer_block(Var<T> x, const std::string& prefix) {
        Var<T> n1 = layernorm_chan(x, p(prefix + ".ln1.w"), p(prefix + ".ln1.b"));
        x = add(x, channel_attention(n1, prefix + ".attn"));
        Var<T> n2 = layernorm_chan(x, p(prefix + ".ln2.w"), p(prefix + ".ln2.b"));
        return add(x, gated_ffn(n2, prefix + ".ffn"));
    }

    // Attention across channels: per head a (C/heads)x(C/heads) map on
    // L2-normalized channel descriptors, with a learned temperature.
    Var<T> channel_attention(Var<T> x, const std::string& prefix) {
        const int64_t C = cfg_.channels, heads = cfg_.heads, dh = C / heads;
        const int64_t H = x.val().shape[1], W = x.val().shape[2];
        Var<T> qkv = conv2d(x, p(prefix + ".qkv.w"), p(prefix + ".qkv.b"), 0);
        qkv = dwconv2d(qkv, p(prefix + ".dw.w"), p(prefix + ".dw.b"), 1);
        Var<T> q = reshape(slice(qkv, 0, 0, C), {heads, dh, H * W});
        Var<T> k = reshape(slice(qkv, 0, C, C), {heads, dh, H * W});
        Var<T> v = reshape(slice(qkv, 0, 2 * C, C), {heads, dh, H * W});
        q = l2norm_rows(q);
        k = l2norm_rows(k);
        Var<T> logits = bmm(q, permute(k, {0, 2, 1}));             // (heads, dh, dh)
        logits = mul(logits, reshape(p(prefix + ".temp"), {heads, 1, 1}));
        Var<T> attn = softmax_last(logits);
        if (trace_) trace_->push(prefix + ".softmax", attn.val());
        Var<T> out = reshape(bmm(attn, v), {C, H, W});
        return conv2d(out, p(prefix + ".proj.w"), p(prefix + ".proj.b"), 0);
    }

    Var<T> gated_ffn(Var<T> x, const std::string& prefix) {
        const int64_t hC = cfg_.ffn_expansion * cfg_.channels;
        Var<T> y = conv2d(x, p(prefix + ".in.w"), p(prefix + ".in.b"), 0);
        y = dwconv2d(y, p(prefix + ".dw.w"), p(prefix + ".dw.b"), 1);
        Var<T> a = slice(y, 0, 0, hC);
        Var<T> g = slice(y, 0, hC, hC);
        return conv2d(mul(gelu(a), g), p(prefix + ".out.w"), p(prefix + ".out.b"), 0);
    }

    // Text queries attend over image positions; the attended value summary is
    // applied as channel-wise scale/shift behind a zero-initialized gate, then
    // a gated feed-forward with pre-norm residual.
    Var<T> cross_attention(Var<T> text, Var<T> x, const std::string& prefix) {
        const int64_t C = cfg_.channels, heads = cfg_.heads, dh = C / heads;
        const int64_t H = x.val().shape[1], W = x.val().shape[2];
        const int64_t L = text.val().shape[0];

        Var<T> q = add(matmul(text, p(prefix + ".q.w")), p(prefix + ".q.b"));  // (L,C)
        Var<T> flat = permute(reshape(x, {C, H * W}), {1, 0});                 // (HW,C)
        Var<T> k = add(matmul(flat, p(prefix + ".k.w")), p(prefix + ".k.b"));
        Var<T> v = add(matmul(flat, p(prefix + ".v.w")), p(prefix + ".v.b"));

        Var<T> qh = permute(reshape(q, {L, heads, dh}), {1, 0, 2});       // (heads,L,dh)
        Var<T> kh = permute(reshape(k, {H * W, heads, dh}), {1, 2, 0});   // (heads,dh,HW)
        Var<T> vh = permute(reshape(v, {H * W, heads, dh}), {1, 0, 2});   // (heads,HW,dh)

        Var<T> logits = scale(bmm(qh, kh), T(1) / std::sqrt(static_cast<T>(dh)));
        Var<T> attn = softmax_last(logits);  // (heads, L, HW)
        if (trace_) trace_->push(prefix + ".softmax", attn.val());

        Var<T> attended = permute(bmm(attn, vh), {1, 0, 2});  // (L,heads,dh)
        Var<T> summary = mean_axes(reshape(attended, {L, C}), {0}, false);  // (C)

        Var<T> srow = reshape(summary, {1, C});
        Var<T> sc = add(matmul(srow, p(prefix + ".scale.w")), p(prefix + ".scale.b"));
        Var<T> sh = add(matmul(srow, p(prefix + ".shift.w")), p(prefix + ".shift.b"));
        Var<T> mod = add(mul(reshape(sc, {C, 1, 1}), x), reshape(sh, {C, 1, 1}));
        Var<T> gate = reshape(p(prefix + ".gate"), {1, 1, 1});
        x = add(x, mul(gate, mod));

        Var<T> n = layernorm_chan(x, p(prefix + ".ffn_ln.w"), p(prefix + ".ffn_ln.b"));
        return add(x, gated_ffn(n, prefix + ".ffn"));
    }

    // Channel concatenation followed by a learned 1x1 projection back to C.
    Var<T> fuse_visual(Var<T> f1, Var<T> f2) {
        require(f1.val().shape == f2.val().shape, "fuse_visual: spatial mismatch");
        Var<T> cat = concat<T>({f1, f2}, 0);
        return conv2d(cat, p("fuse.w"), p("fuse.b"), 0);
    }

    Var<T> decode(Var<T> x) {
        for (int64_t n = 0; n < cfg_.decoder_blocks; ++n)
            x = restormer_block(x, "dec.rb" + std::to_string(n));
        return sigmoid(conv2d(x, p("dec.out.w"), p("dec.out.b"), 1));
    }

    Var<T> lift_const(const TensorT<T>& t) {
        if (tape_) return tape_->constant(t);
        return Var<T>(t);
    }

private:
    Var<T> p(const std::string& name) {
        auto it = bound_.find(name);
        if (it != bound_.end()) return it->second;
        Var<T> v;
        if (tape_)
            v = tape_->leaf(params_.at(name), train_);
        else
            v = Var<T>(params_.at(name));
        bound_.emplace(name, v);
        return v;
    }

    Var<T> l2norm_rows(Var<T> x) {
        Var<T> n2 = reduce_sum(square(x), {2}, true);
        return div(x, sqrt_op(add_scalar(n2, T(1e-12))));
    }

    void check_finite(const Var<T>& v, const std::string& where) {
        if (!v.val().all_finite()) throw NumericFault("non-finite activations in " + where);
    }

    NetConfig cfg_;
    ParamSetT<T>& params_;
    Tape<T>* tape_;
    bool train_;
    TraceSink<T>* trace_;
    std::map<std::string, Var<T>> bound_;
};

// --- Image-level convenience (inference) --------------------------------------

// Pads, runs the eager forward on luma, and crops. Inputs are single-channel
// [0,1] images of identical size.
inline Image fuse_luma(const NetConfig& cfg, ParamSet& params, const Image& luma1,
                       const Image& luma2, const TextFeature* fused_text) {
    require(luma1.channels == 1 && luma2.channels == 1, "fuse_luma expects luma images");
    require(luma1.height == luma2.height && luma1.width == luma2.width,
            "source image size mismatch");
    luma1.check_network_size();
    luma1.check_range();
    luma2.check_range();

    PadInfo info;
    Image p1 = pad_to_multiple(luma1, kPadMultiple, info);
    Image p2 = pad_to_multiple(luma2, kPadMultiple, info);
    TensorT<float> t1({1, p1.height, p1.width}, p1.data);
    TensorT<float> t2({1, p2.height, p2.width}, p2.data);

    FusionNet<float> net(cfg, params, nullptr, false);
    const TensorT<float>* text = nullptr;
    TensorT<float> text_mat;
    if (cfg.use_text) {
        require(fused_text != nullptr, "fused text feature required");
        text_mat = fused_text->matrix;
        text = &text_mat;
    }
    Var<float> out = net.forward(t1, t2, text, luma1.height, luma1.width);

    Image fused(luma1.height, luma1.width, 1);
    fused.role = ImageRole::Fused;
    fused.data = out.val().data;
    return fused;
}

}  // namespace tgfuse
