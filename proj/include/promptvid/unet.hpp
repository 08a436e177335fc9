#pragma once

// Tiny inflated video U-Net. Three-level encoder/decoder over [C, F, H, W]
// latents with residual 3D-conv blocks, cross-frame + text attention at the
// configured encoder levels, and temporal attention at the bottleneck. The
// same encoder path, run on a single-frame prompt latent with attention
// skipped, yields the multi-scale prompt feature pyramid that injection
// consumes.

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "promptvid/attention.hpp"
#include "promptvid/conditioning.hpp"
#include "promptvid/detmath.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/injection.hpp"
#include "promptvid/param_store.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

struct UNetConfig {
    int base_channels = 16;
    std::vector<int> channel_multipliers{1, 2, 4};
    int frames = 8;
    int latent_h = 32;
    int latent_w = 32;
    int latent_channels = 4;
    std::vector<int> attention_levels{0, 1, 2};
    int head_dim = 8;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int channels(int level) const { return base_channels * channel_multipliers[static_cast<std::size_t>(level)]; }
    int time_dim() const { return 4 * base_channels; }
    bool has_attention(int level) const {
        for (int l : attention_levels)
            if (l == level) return true;
        return false;
    }
    int attention_index(int level) const {
        for (std::size_t i = 0; i < attention_levels.size(); ++i)
            if (attention_levels[i] == level) return static_cast<int>(i);
        fail(ErrorKind::state, "level " + std::to_string(level) + " carries no attention");
    }

    void validate() const {
        if (base_channels < 1) fail(ErrorKind::config, "base_channels must be >= 1");
        if (channel_multipliers.empty()) fail(ErrorKind::config, "need at least one level");
        for (int m : channel_multipliers)
            if (m < 1) fail(ErrorKind::config, "channel multipliers must be >= 1");
        if (frames < 1) fail(ErrorKind::config, "frames must be >= 1");
        if (latent_channels < 1) fail(ErrorKind::config, "latent_channels must be >= 1");
        const int down = 1 << (levels() - 1);
        if (latent_h % down != 0 || latent_w % down != 0) {
            fail(ErrorKind::config, "latent extents " + std::to_string(latent_h) + "x" +
                                        std::to_string(latent_w) + " not divisible by " + std::to_string(down));
        }
        if (attention_levels.empty()) fail(ErrorKind::config, "need at least one attention level");
        for (std::size_t i = 0; i < attention_levels.size(); ++i) {
            const int l = attention_levels[i];
            if (l < 0 || l >= levels()) fail(ErrorKind::config, "attention level " + std::to_string(l) + " out of range");
            if (i > 0 && attention_levels[i] != attention_levels[i - 1] + 1) {
                // contiguity keeps the prompt pyramid's resolutions halving per level
                fail(ErrorKind::config, "attention levels must be contiguous ascending");
            }
            if (channels(l) % head_dim != 0) {
                fail(ErrorKind::config, "head_dim " + std::to_string(head_dim) +
                                            " does not divide channels at level " + std::to_string(l));
            }
        }
        if (head_dim < 1) fail(ErrorKind::config, "head_dim must be >= 1");
    }

    std::string canonical_string() const {
        std::string s = "unet;base=" + std::to_string(base_channels) + ";mults=";
        for (std::size_t i = 0; i < channel_multipliers.size(); ++i)
            s += (i ? "," : "") + std::to_string(channel_multipliers[i]);
        s += ";frames=" + std::to_string(frames) + ";h=" + std::to_string(latent_h) +
             ";w=" + std::to_string(latent_w) + ";lc=" + std::to_string(latent_channels) + ";attn=";
        for (std::size_t i = 0; i < attention_levels.size(); ++i)
            s += (i ? "," : "") + std::to_string(attention_levels[i]);
        s += ";d=" + std::to_string(head_dim);
        return s;
    }
    std::uint64_t config_hash() const { return fnv1a(canonical_string()); }
};

template <class T>
struct FeaturePyramid {
    // one entry per cross-frame-attention layer, encoder traversal order,
    // each [tokens_level, channels_level]
    std::vector<Tensor<T>> levels;
};

namespace unetdetail {

// Largest group count from {8,4,2} that divides c while keeping at least two
// channels per group. Single-channel groups would act as instance norm and
// erase any per-channel conditioning bias added before the norm.
inline int norm_groups(int c) {
    for (int g : {8, 4, 2})
        if (c % g == 0 && c / g >= 2) return g;
    return 1;
}

} // namespace unetdetail

// Sinusoidal embedding of an integer timestep.
template <class T>
Tensor<T> timestep_sinusoid(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) fail(ErrorKind::config, "timestep embedding width must be even");
    std::vector<T> e(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim / 2; ++i) {
        const double rate = detmath::det_exp(-detmath::det_log(10000.0) * (2.0 * i / dim));
        e[static_cast<std::size_t>(2 * i)] = static_cast<T>(detmath::det_sin(t * rate));
        e[static_cast<std::size_t>(2 * i + 1)] = static_cast<T>(detmath::det_cos(t * rate));
    }
    return Tensor<T>::from({dim}, std::move(e));
}

// ---------------------------------------------------------------------------
// residual block: GroupNorm -> SiLU -> conv3d, timestep bias, GroupNorm ->
// SiLU -> conv3d, plus skip (1x1x1 conv when channel counts differ)
// ---------------------------------------------------------------------------

template <class T>
void create_resblock(ParameterStore<T>& store, const RngStream& root, const std::string& prefix,
                     int cin, int cout, int kt, int time_dim, StageTag tag) {
    store.create_full(prefix + "/gn1/gamma", {cin}, T(1), tag);
    store.create_zeros(prefix + "/gn1/beta", {cin}, tag);
    store.create_normal(prefix + "/conv1/w", {cout, cin, kt, 3, 3}, root,
                        1.0 / std::sqrt(static_cast<double>(cin * kt * 9)), tag);
    store.create_zeros(prefix + "/conv1/b", {cout}, tag);
    store.create_normal(prefix + "/time/w", {time_dim, cout}, root,
                        1.0 / std::sqrt(static_cast<double>(time_dim)), tag);
    store.create_zeros(prefix + "/time/b", {cout}, tag);
    store.create_full(prefix + "/gn2/gamma", {cout}, T(1), tag);
    store.create_zeros(prefix + "/gn2/beta", {cout}, tag);
    store.create_normal(prefix + "/conv2/w", {cout, cout, kt, 3, 3}, root,
                        1.0 / std::sqrt(static_cast<double>(cout * kt * 9)), tag);
    store.create_zeros(prefix + "/conv2/b", {cout}, tag);
    if (cin != cout) {
        store.create_normal(prefix + "/skip/w", {cout, cin, 1, 1, 1}, root,
                            1.0 / std::sqrt(static_cast<double>(cin)), tag);
        store.create_zeros(prefix + "/skip/b", {cout}, tag);
    }
}

// x: [1, Cin, F, H, W]; temb: [time_dim]
template <class T>
Tensor<T> inflated_resblock(const ParameterStore<T>& store, const std::string& prefix,
                            const Tensor<T>& x, const Tensor<T>& temb) {
    if (x.rank() != 5) fail(ErrorKind::dimension, "inflated_resblock: need [1,C,F,H,W]");
    const auto w1 = store.get(prefix + "/conv1/w");
    if (x.extent(1) != w1.extent(1)) {
        fail(ErrorKind::dimension, "inflated_resblock: input channels " + std::to_string(x.extent(1)) +
                                       " do not match block width " + std::to_string(w1.extent(1)));
    }
    const std::int64_t kt = w1.extent(2);
    auto h = channel_affine(group_norm(x, unetdetail::norm_groups(static_cast<int>(x.extent(1)))),
                            store.get(prefix + "/gn1/gamma"), store.get(prefix + "/gn1/beta"));
    h = conv3d(silu(h), w1, store.get(prefix + "/conv1/b"),
               Conv3dSpec::same(kt, 3, 3));
    auto tw = store.get(prefix + "/time/w");
    auto tv = add_bias_lastdim(matmul(reshape(temb, {1, temb.extent(0)}), tw), store.get(prefix + "/time/b"));
    const std::int64_t cout = tv.extent(1);
    h = channel_affine(group_norm(h, unetdetail::norm_groups(static_cast<int>(cout))),
                       store.get(prefix + "/gn2/gamma"), store.get(prefix + "/gn2/beta"));
    // timestep conditioning as a per-channel bias, applied after the second
    // norm so normalization cannot subtract it back out
    h = channel_affine(h, Tensor<T>::full({cout}, T(1)), reshape(tv, {cout}));
    h = conv3d(silu(h), store.get(prefix + "/conv2/w"), store.get(prefix + "/conv2/b"),
               Conv3dSpec::same(kt, 3, 3));
    Tensor<T> skip = x;
    if (store.has(prefix + "/skip/w")) {
        skip = conv3d(x, store.get(prefix + "/skip/w"), store.get(prefix + "/skip/b"), Conv3dSpec{});
    }
    return add(h, skip);
}

// ---------------------------------------------------------------------------
// parameter creation
// ---------------------------------------------------------------------------

template <class T>
void create_unet_params(const UNetConfig& cfg, int d_txt, ParameterStore<T>& store,
                        const RngStream& root) {
    cfg.validate();
    const int td = cfg.time_dim();
    store.create_normal("unet/conv_in/w", {cfg.channels(0), cfg.latent_channels, 1, 3, 3}, root,
                        1.0 / std::sqrt(static_cast<double>(cfg.latent_channels * 9)), StageTag::frozen);
    store.create_zeros("unet/conv_in/b", {cfg.channels(0)}, StageTag::frozen);
    for (int l = 0; l < 2; ++l) {
        store.create_normal("unet/time/l" + std::to_string(l) + "/w", {td, td}, root,
                            1.0 / std::sqrt(static_cast<double>(td)), StageTag::frozen);
        store.create_zeros("unet/time/l" + std::to_string(l) + "/b", {td}, StageTag::frozen);
    }
    for (int l = 0; l < cfg.levels(); ++l) {
        const int cin = l == 0 ? cfg.channels(0) : cfg.channels(l - 1);
        const int c = cfg.channels(l);
        create_resblock(store, root, "unet/enc" + std::to_string(l) + "/res", cin, c, 3, td,
                        StageTag::frozen);
        if (cfg.has_attention(l)) {
            const std::string ap = "unet/attn" + std::to_string(l) + "/";
            store.create_full(ap + "norm/gamma", {c}, T(1), StageTag::frozen);
            store.create_zeros(ap + "norm/beta", {c}, StageTag::frozen);
            const double std_c = 1.0 / std::sqrt(static_cast<double>(c));
            for (const char* n : {"wq", "wk", "wv", "wo"})
                store.create_normal(ap + n, {c, c}, root, std_c, StageTag::frozen);
            const std::string tp = "unet/text" + std::to_string(l) + "/";
            store.create_full(tp + "norm/gamma", {c}, T(1), StageTag::frozen);
            store.create_zeros(tp + "norm/beta", {c}, StageTag::frozen);
            store.create_normal(tp + "wq", {c, c}, root, std_c, StageTag::frozen);
            // the trainable text-conditioning pathway
            store.create_normal(tp + "wk", {d_txt, c}, root,
                                1.0 / std::sqrt(static_cast<double>(d_txt)), StageTag::stage1);
            store.create_normal(tp + "wv", {d_txt, c}, root,
                                1.0 / std::sqrt(static_cast<double>(d_txt)), StageTag::stage1);
            store.create_normal(tp + "wo", {c, c}, root, std_c, StageTag::frozen);
        }
    }
    const int cm = cfg.channels(cfg.levels() - 1);
    create_resblock(store, root, "unet/mid/res1", cm, cm, 3, td, StageTag::frozen);
    const double std_m = 1.0 / std::sqrt(static_cast<double>(cm));
    for (const char* n : {"wq", "wk", "wv", "wo"})
        store.create_normal(std::string("unet/mid/temporal/") + n, {cm, cm}, root, std_m, StageTag::frozen);
    create_resblock(store, root, "unet/mid/res2", cm, cm, 3, td, StageTag::frozen);
    for (int l = cfg.levels() - 1; l >= 0; --l) {
        const int c = cfg.channels(l);
        const int cin = (l == cfg.levels() - 1) ? 2 * c : cfg.channels(l + 1) + c;
        create_resblock(store, root, "unet/dec" + std::to_string(l) + "/res", cin, c, 3, td,
                        StageTag::frozen);
    }
    store.create_full("unet/out_norm/gamma", {cfg.channels(0)}, T(1), StageTag::frozen);
    store.create_zeros("unet/out_norm/beta", {cfg.channels(0)}, StageTag::frozen);
    // final projection back to latent channels; owned by the refiner stage
    store.create_normal("unet/conv_out/w", {cfg.latent_channels, cfg.channels(0), 1, 3, 3}, root,
                        1.0 / std::sqrt(static_cast<double>(cfg.channels(0) * 9)), StageTag::refiner);
    store.create_zeros("unet/conv_out/b", {cfg.latent_channels}, StageTag::refiner);
}

// Names of the per-level injection projections (created by stage-2 setup).
inline std::string injection_key_name(int level) {
    return "unet/attn" + std::to_string(level) + "/wki";
}
inline std::string injection_value_name(int level) {
    return "unet/attn" + std::to_string(level) + "/wvi";
}

// Stage-2 setup: the injection projections start as value copies of the base
// cross-frame K/V projections, so injected attention initially treats prompt
// features exactly like frame features.
template <class T>
void create_injection_params(const UNetConfig& cfg, ParameterStore<T>& store) {
    for (int l : cfg.attention_levels) {
        const std::string ap = "unet/attn" + std::to_string(l) + "/";
        store.create(injection_key_name(l), store.get(ap + "wk").detach(), StageTag::stage2);
        store.create(injection_value_name(l), store.get(ap + "wv").detach(), StageTag::stage2);
    }
}

namespace unetdetail {

// [1,C,F,h,w] -> [F, h*w, C]
template <class T>
Tensor<T> to_frame_layout(const Tensor<T>& x) {
    return permute(reshape(x, {x.extent(1), x.extent(2), x.extent(3) * x.extent(4)}), {1, 2, 0});
}

// [F, h*w, C] -> [1,C,F,h,w]
template <class T>
Tensor<T> from_frame_layout(const Tensor<T>& fb, std::int64_t h, std::int64_t w) {
    return reshape(permute(fb, {2, 0, 1}), {1, fb.extent(2), fb.extent(0), h, w});
}

template <class T>
Tensor<T> site_norm(const ParameterStore<T>& store, const std::string& prefix, const Tensor<T>& x) {
    return channel_affine(group_norm(x, norm_groups(static_cast<int>(x.extent(1)))),
                          store.get(prefix + "norm/gamma"), store.get(prefix + "norm/beta"));
}

template <class T>
Tensor<T> time_features(const ParameterStore<T>& store, const UNetConfig& cfg, int t) {
    auto e = reshape(timestep_sinusoid<T>(t, cfg.time_dim()), {1, cfg.time_dim()});
    e = silu(add_bias_lastdim(matmul(e, store.get("unet/time/l0/w")), store.get("unet/time/l0/b")));
    e = add_bias_lastdim(matmul(e, store.get("unet/time/l1/w")), store.get("unet/time/l1/b"));
    return reshape(e, {cfg.time_dim()});
}

} // namespace unetdetail

// Everything up to (and including) the output norm + SiLU. x is one clip,
// [latent_channels, F, H, W]; the pyramid is only consulted when injection is
// enabled. The pre-head features are exposed separately so a residual refiner
// can be spliced in right before the final convolution.
template <class T>
Tensor<T> unet_predict_features(const UNetConfig& cfg, const ParameterStore<T>& store, const Tensor<T>& x,
                                int t, const ComposedCondition<T>& cond,
                                const FeaturePyramid<std::type_identity_t<T>>* pyramid,
                                const InjectionSettings& inj) {
    cfg.validate();
    if (x.rank() != 4 || x.extent(0) != cfg.latent_channels || x.extent(1) != cfg.frames ||
        x.extent(2) != cfg.latent_h || x.extent(3) != cfg.latent_w) {
        fail(ErrorKind::dimension, "unet_predict: latent " + to_string(x.shape()) +
                                       " does not match config " + cfg.canonical_string());
    }
    if (inj.enabled) {
        if (!pyramid) fail(ErrorKind::state, "injection enabled without a prompt pyramid");
        if (pyramid->levels.size() != cfg.attention_levels.size()) {
            fail(ErrorKind::state, "prompt pyramid has " + std::to_string(pyramid->levels.size()) +
                                       " levels, expected " + std::to_string(cfg.attention_levels.size()));
        }
    }
    auto temb = unetdetail::time_features(store, cfg, t);
    auto h = conv3d(reshape(x, {1, cfg.latent_channels, cfg.frames, cfg.latent_h, cfg.latent_w}),
                    store.get("unet/conv_in/w"), store.get("unet/conv_in/b"), Conv3dSpec::same(1, 3, 3));

    std::vector<Tensor<T>> skips;
    for (int l = 0; l < cfg.levels(); ++l) {
        h = inflated_resblock(store, "unet/enc" + std::to_string(l) + "/res", h, temb);
        if (cfg.has_attention(l)) {
            const std::int64_t hh = h.extent(3), ww = h.extent(4);
            const std::string ap = "unet/attn" + std::to_string(l) + "/";
            auto fb = unetdetail::to_frame_layout(unetdetail::site_norm(store, ap, h));
            Tensor<T> attn_out;
            if (inj.enabled) {
                attn_out = injected_cross_frame_attention(
                    fb, pyramid->levels[static_cast<std::size_t>(cfg.attention_index(l))],
                    store.get(ap + "wq"), store.get(ap + "wk"), store.get(ap + "wv"),
                    store.get(ap + "wo"), store.get(injection_key_name(l)),
                    store.get(injection_value_name(l)), cfg.head_dim, inj);
            } else {
                attn_out = cross_frame_attention_base(fb, store.get(ap + "wq"), store.get(ap + "wk"),
                                                      store.get(ap + "wv"), store.get(ap + "wo"),
                                                      cfg.head_dim);
            }
            h = add(h, unetdetail::from_frame_layout(attn_out, hh, ww));

            const std::string tp = "unet/text" + std::to_string(l) + "/";
            auto tb = unetdetail::to_frame_layout(unetdetail::site_norm(store, tp, h));
            auto text_out = cross_attention_text(tb, cond, store.get(tp + "wq"), store.get(tp + "wk"),
                                                 store.get(tp + "wv"), store.get(tp + "wo"), cfg.head_dim);
            h = add(h, unetdetail::from_frame_layout(text_out, hh, ww));
        }
        skips.push_back(h);
        if (l + 1 < cfg.levels()) h = resample2x_down(h);
    }

    h = inflated_resblock(store, "unet/mid/res1", h, temb);
    {
        // temporal attention carries its own residual; applied in frame layout
        const std::int64_t hh = h.extent(3), ww = h.extent(4);
        auto fb = unetdetail::to_frame_layout(h);
        fb = temporal_attention(fb, store.get("unet/mid/temporal/wq"), store.get("unet/mid/temporal/wk"),
                                store.get("unet/mid/temporal/wv"), store.get("unet/mid/temporal/wo"),
                                cfg.head_dim);
        h = unetdetail::from_frame_layout(fb, hh, ww);
    }
    h = inflated_resblock(store, "unet/mid/res2", h, temb);

    for (int l = cfg.levels() - 1; l >= 0; --l) {
        h = concat<T>({h, skips[static_cast<std::size_t>(l)]}, 1);
        h = inflated_resblock(store, "unet/dec" + std::to_string(l) + "/res", h, temb);
        if (l > 0) h = resample2x_up(h);
    }

    return silu(channel_affine(group_norm(h, unetdetail::norm_groups(cfg.channels(0))),
                               store.get("unet/out_norm/gamma"), store.get("unet/out_norm/beta")));
}

// Final projection back to latent channels.
template <class T>
Tensor<T> unet_apply_head(const UNetConfig& cfg, const ParameterStore<T>& store,
                          const Tensor<T>& features) {
    if (features.rank() != 5 || features.extent(0) != 1 || features.extent(1) != cfg.channels(0) ||
        features.extent(2) != cfg.frames || features.extent(3) != cfg.latent_h ||
        features.extent(4) != cfg.latent_w) {
        fail(ErrorKind::dimension, "unet_apply_head: features " + to_string(features.shape()) +
                                       " do not match config " + cfg.canonical_string());
    }
    auto h = conv3d(features, store.get("unet/conv_out/w"), store.get("unet/conv_out/b"),
                    Conv3dSpec::same(1, 3, 3));
    return reshape(h, {cfg.latent_channels, cfg.frames, cfg.latent_h, cfg.latent_w});
}

// Noise prediction for one clip: features followed by the head.
template <class T>
Tensor<T> unet_predict(const UNetConfig& cfg, const ParameterStore<T>& store, const Tensor<T>& x,
                       int t, const ComposedCondition<T>& cond,
                       const FeaturePyramid<std::type_identity_t<T>>* pyramid,
                       const InjectionSettings& inj) {
    return unet_apply_head(cfg, store, unet_predict_features(cfg, store, x, t, cond, pyramid, inj));
}

// Runs the noised prompt latent [latent_channels, H, W] through the encoder
// path as a one-frame video with the same timestep embedding, capturing the
// normalized pre-attention hidden state at every cross-frame-attention site.
// Attention itself is skipped on this pass: the captured features are pure
// image features, independent of any caption.
template <class T>
FeaturePyramid<T> extract_prompt_pyramid(const UNetConfig& cfg, const ParameterStore<T>& store,
                                         const Tensor<T>& x_prompt, int t) {
    cfg.validate();
    if (x_prompt.rank() != 3 || x_prompt.extent(0) != cfg.latent_channels ||
        x_prompt.extent(1) != cfg.latent_h || x_prompt.extent(2) != cfg.latent_w) {
        fail(ErrorKind::dimension, "extract_prompt_pyramid: prompt latent " + to_string(x_prompt.shape()) +
                                       " does not match config");
    }
    auto temb = unetdetail::time_features(store, cfg, t);
    auto h = conv3d(reshape(x_prompt, {1, cfg.latent_channels, 1, cfg.latent_h, cfg.latent_w}),
                    store.get("unet/conv_in/w"), store.get("unet/conv_in/b"), Conv3dSpec::same(1, 3, 3));
    FeaturePyramid<T> pyr;
    for (int l = 0; l < cfg.levels(); ++l) {
        h = inflated_resblock(store, "unet/enc" + std::to_string(l) + "/res", h, temb);
        if (cfg.has_attention(l)) {
            const std::string ap = "unet/attn" + std::to_string(l) + "/";
            auto normed = unetdetail::site_norm(store, ap, h);
            auto fb = unetdetail::to_frame_layout(normed); // [1, tokens, C]
            pyr.levels.push_back(reshape(fb, {fb.extent(1), fb.extent(2)}).detach());
        }
        if (l + 1 < cfg.levels()) h = resample2x_down(h);
    }
    return pyr;
}

} // namespace promptvid
