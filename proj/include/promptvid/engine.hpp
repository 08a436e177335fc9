#pragma once

// Composition layer tying conditioning, the backbone, injection, the output
// refiner, and the ancestral sampler into one epsilon predictor and one
// generation entry point. Two pieces here are deliberate small stand-ins for
// large pretrained systems:
//
//  - a frozen linear pixel<->latent codec whose mixing columns are exactly
//    orthonormal, so decoding an encoded image recovers it exactly, and
//  - an analytic epsilon prior sqrt(1 - abar_t) * x_t added to the backbone
//    output. For unit-normal clean latents that term is the exact posterior
//    mean of the noise given x_t, so an untrained backbone (which contributes
//    a small residual) already behaves like a generic denoiser; training
//    shapes the residual.

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "promptvid/conditioning.hpp"
#include "promptvid/diffusion.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/injection.hpp"
#include "promptvid/param_store.hpp"
#include "promptvid/rng.hpp"
#include "promptvid/tensor.hpp"
#include "promptvid/unet.hpp"
#include "promptvid/watermark.hpp"

namespace promptvid {

// ---------------------------------------------------------------------------
// frozen linear codec between [..,3] pixels and [4,..] latents
// ---------------------------------------------------------------------------

inline constexpr int codec_latent_channels = 4;
// Power of two so scaling and unscaling are exact.
inline constexpr double codec_scale = 2.0;

// First three columns of a 4x4 Hadamard matrix scaled to unit columns. Row c
// holds the weights of latent channel c over (R, G, B); every entry is +-0.5,
// so column inner products are exactly 1 on the diagonal and 0 off it.
inline const double* codec_matrix() {
    static const double m[12] = {
        0.5, 0.5,  0.5,  //
        0.5, -0.5, 0.5,  //
        0.5, 0.5,  -0.5, //
        0.5, -0.5, -0.5, //
    };
    return m;
}

namespace enginedetail {

// pixels laid out [..., 3] -> latents [4, ...]; centers pixels at 0.5 so the
// latent distribution is zero-mean on [0,1] data.
template <class T>
std::vector<T> encode_pixels(const std::vector<T>& px, std::int64_t n_sites) {
    const double* m = codec_matrix();
    std::vector<T> out(static_cast<std::size_t>(codec_latent_channels * n_sites));
    for (std::int64_t s = 0; s < n_sites; ++s) {
        const T* p = px.data() + 3 * s;
        for (int c = 0; c < codec_latent_channels; ++c) {
            double acc = 0.0;
            for (int k = 0; k < 3; ++k) acc += m[3 * c + k] * (static_cast<double>(p[k]) - 0.5);
            out[static_cast<std::size_t>(c * n_sites + s)] = static_cast<T>(codec_scale * acc);
        }
    }
    return out;
}

template <class T>
std::vector<T> decode_latents(const std::vector<T>& lat, std::int64_t n_sites) {
    const double* m = codec_matrix();
    std::vector<T> out(static_cast<std::size_t>(3 * n_sites));
    for (std::int64_t s = 0; s < n_sites; ++s) {
        for (int k = 0; k < 3; ++k) {
            double acc = 0.0;
            for (int c = 0; c < codec_latent_channels; ++c)
                acc += m[3 * c + k] * static_cast<double>(lat[static_cast<std::size_t>(c * n_sites + s)]);
            out[static_cast<std::size_t>(3 * s + k)] = static_cast<T>(acc / codec_scale + 0.5);
        }
    }
    return out;
}

} // namespace enginedetail

// [F, H, W, 3] pixels -> [4, F, H, W] latents
template <class T>
Tensor<T> encode_frames(const Tensor<T>& pixels) {
    if (pixels.rank() != 4 || pixels.extent(3) != 3) {
        fail(ErrorKind::dimension, "encode_frames expects [F,H,W,3], got " + to_string(pixels.shape()));
    }
    const std::int64_t F = pixels.extent(0), H = pixels.extent(1), W = pixels.extent(2);
    return Tensor<T>::from({codec_latent_channels, F, H, W},
                           enginedetail::encode_pixels(pixels.values(), F * H * W));
}

// [4, F, H, W] latents -> [F, H, W, 3] pixels
template <class T>
Tensor<T> decode_frames(const Tensor<T>& latents) {
    if (latents.rank() != 4 || latents.extent(0) != codec_latent_channels) {
        fail(ErrorKind::dimension, "decode_frames expects [4,F,H,W], got " + to_string(latents.shape()));
    }
    const std::int64_t F = latents.extent(1), H = latents.extent(2), W = latents.extent(3);
    std::vector<T> px = enginedetail::decode_latents(latents.values(), F * H * W);
    // interleave back to [F,H,W,3]
    return Tensor<T>::from({F, H, W, 3}, std::move(px));
}

// [H, W, 3] pixels -> [4, H, W] latent (prompt images)
template <class T>
Tensor<T> encode_image(const Tensor<T>& pixels) {
    if (pixels.rank() != 3 || pixels.extent(2) != 3) {
        fail(ErrorKind::dimension, "encode_image expects [H,W,3], got " + to_string(pixels.shape()));
    }
    const std::int64_t H = pixels.extent(0), W = pixels.extent(1);
    return Tensor<T>::from({codec_latent_channels, H, W},
                           enginedetail::encode_pixels(pixels.values(), H * W));
}

template <class T>
Tensor<T> decode_image(const Tensor<T>& latent) {
    if (latent.rank() != 3 || latent.extent(0) != codec_latent_channels) {
        fail(ErrorKind::dimension, "decode_image expects [4,H,W], got " + to_string(latent.shape()));
    }
    const std::int64_t H = latent.extent(1), W = latent.extent(2);
    return Tensor<T>::from({H, W, 3}, enginedetail::decode_latents(latent.values(), H * W));
}

// ---------------------------------------------------------------------------
// epsilon prediction and generation
// ---------------------------------------------------------------------------

struct EngineFlags {
    InjectionSettings injection;
    bool use_refiner = false;
    // Redraw the prompt-latent noise at every sampling step instead of
    // reusing one draw per generation.
    bool fresh_prompt_noise = false;
};

// Full-engine epsilon prediction: backbone features, optional refiner
// residual, head, plus the analytic prior.
template <class T>
Tensor<T> predict_epsilon(const UNetConfig& cfg, const ParameterStore<T>& store,
                          const NoiseSchedule& sched, const Tensor<T>& x_t, int t,
                          const ComposedCondition<T>& cond,
                          const FeaturePyramid<std::type_identity_t<T>>* pyramid,
                          const EngineFlags& flags, const RefinerConfig* refiner = nullptr) {
    auto feats = unet_predict_features(cfg, store, x_t, t, cond, pyramid, flags.injection);
    if (flags.use_refiner) {
        if (!refiner) fail(ErrorKind::state, "refiner enabled without a refiner config");
        feats = apply_refined_output(*refiner, store, feats);
    }
    auto out = unet_apply_head(cfg, store, feats);
    return add(out, mul_scalar(x_t, std::sqrt(1.0 - sched.alpha_bar_at(t))));
}

template <class T>
struct GenerationInputs {
    ComposedCondition<T> cond;
    // Clean prompt-image latent [latent_channels, H, W]; must be defined when
    // injection is enabled, ignored otherwise.
    Tensor<T> prompt_latent;
};

// Composed condition + prompt latent for one (caption, prompt image) pair.
// (k, n) is the subject span in the tokenized caption; the prompt image must
// match the backbone's latent extents so it can ride the same encoder path.
template <class T>
GenerationInputs<T> build_generation_inputs(const Conditioning<T>& conditioning,
                                            const ParameterStore<T>& store, const Vocabulary& vocab,
                                            const UNetConfig& cfg, const std::string& caption, int k,
                                            int n, const Tensor<T>& prompt_image_hwc) {
    if (prompt_image_hwc.rank() != 3 || prompt_image_hwc.extent(0) != cfg.latent_h ||
        prompt_image_hwc.extent(1) != cfg.latent_w || prompt_image_hwc.extent(2) != 3) {
        fail(ErrorKind::dimension, "prompt image must be [" + std::to_string(cfg.latent_h) + "," +
                                       std::to_string(cfg.latent_w) + ",3], got " +
                                       to_string(prompt_image_hwc.shape()));
    }
    GenerationInputs<T> in;
    auto tokens = vocab.encode(caption, conditioning.config().max_tokens);
    auto f_t = conditioning.encode_text(tokens);
    auto f_v = conditioning.encode_image_coarse(prompt_image_hwc);
    auto f_i = conditioning.map_to_text_space(store, f_v);
    in.cond = conditioning.fuse(f_t, tokens, f_i.detach(), k, n);
    in.prompt_latent = encode_image(prompt_image_hwc);
    return in;
}

// Caption-only inputs for the text-only baseline.
template <class T>
GenerationInputs<T> text_only_inputs(const Conditioning<T>& conditioning, const Vocabulary& vocab,
                                     const std::string& caption) {
    GenerationInputs<T> in;
    in.cond = conditioning.text_only(vocab.encode(caption, conditioning.config().max_tokens));
    return in;
}

// Ancestral generation of one video latent [latent_channels, F, H, W]. When
// injection is on, the prompt latent is re-noised to the current timestep at
// every step; the noise is one fixed draw per generation by default, or a
// per-step draw behind the fresh_prompt_noise flag. Deterministic in
// (parameters, inputs, flags, seed, steps).
template <class T>
Tensor<T> generate_video(const UNetConfig& cfg, const ParameterStore<T>& store,
                         const NoiseSchedule& sched, const GenerationInputs<T>& in,
                         const EngineFlags& flags, std::uint64_t seed, int steps,
                         const RefinerConfig* refiner = nullptr) {
    cfg.validate();
    if (flags.injection.enabled && !in.prompt_latent.defined()) {
        fail(ErrorKind::state, "injection enabled without a prompt latent");
    }
    RngStream rng(seed);
    const RngStream prompt_root = rng.split(fnv1a("sample/prompt_eps"));
    Tensor<T> fixed_eps;
    if (flags.injection.enabled && !flags.fresh_prompt_noise) {
        RngStream s = prompt_root.split(fnv1a("fixed"));
        fixed_eps = Tensor<T>::randn(in.prompt_latent.shape(), s);
    }
    std::function<Tensor<T>(const Tensor<T>&, int)> model = [&](const Tensor<T>& x, int t) {
        FeaturePyramid<T> pyramid;
        const FeaturePyramid<T>* pp = nullptr;
        if (flags.injection.enabled) {
            Tensor<T> eps = fixed_eps;
            if (flags.fresh_prompt_noise) {
                RngStream s = prompt_root.split(static_cast<std::uint64_t>(t));
                eps = Tensor<T>::randn(in.prompt_latent.shape(), s);
            }
            auto noisy_prompt = forward_noise(sched, in.prompt_latent, t, eps);
            pyramid = extract_prompt_pyramid(cfg, store, noisy_prompt, t);
            pp = &pyramid;
        }
        return predict_epsilon(cfg, store, sched, x, t, in.cond, pp, flags, refiner);
    };
    const Shape latent_shape{cfg.latent_channels, cfg.frames, cfg.latent_h, cfg.latent_w};
    return sample_video<T>(sched, model, latent_shape, seed, steps);
}

} // namespace promptvid
