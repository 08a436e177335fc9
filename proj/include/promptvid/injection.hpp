#pragma once

// Prompt-feature injection into cross-frame attention: extra keys/values
// projected from the prompt feature pyramid update the first frame, and the
// updated first-frame values then propagate to the remaining frames through
// the regular cross-frame pattern.
//
// Two readings of the propagation step are supported: the default follows
// the equation form (frame i-1 contributes its ORIGINAL values), and a
// recursive variant (frame i-1 contributes its already-updated values) sits
// behind a flag.

#include <utility>
#include <vector>

#include "promptvid/attention.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

struct InjectionSettings {
    bool enabled = false;
    bool recursive = false; // propagate already-updated values frame to frame
};

// K_I = features * W_KI, V_I = features * W_VI. Bias-free, so zero features
// give zero keys/values, and at init (weights copied from the base K/V
// projections) this equals the base projection applied to the same features.
template <class T>
std::pair<Tensor<T>, Tensor<T>> project_prompt(const Tensor<T>& features, const Tensor<T>& w_ki,
                                               const Tensor<T>& w_vi) {
    if (features.rank() != 2 || features.extent(1) != w_ki.extent(0) ||
        features.extent(1) != w_vi.extent(0)) {
        fail(ErrorKind::dimension, "project_prompt: features " + to_string(features.shape()) +
                                       " vs projections " + to_string(w_ki.shape()) + " / " +
                                       to_string(w_vi.shape()));
    }
    return {matmul(features, w_ki), matmul(features, w_vi)};
}

// V_0^new = Attention(Q_0 over [K_I; K_0], [V_I; V_0]). With zero-row K_I/V_I
// this is plain frame-0 self-attention.
template <class T>
Tensor<T> update_first_frame(const Tensor<T>& q0, const Tensor<T>& k0, const Tensor<T>& v0,
                             const Tensor<T>& k_i, const Tensor<T>& v_i, int head_dim) {
    if (k_i.extent(0) != v_i.extent(0)) {
        fail(ErrorKind::dimension, "update_first_frame: K_I rows " + std::to_string(k_i.extent(0)) +
                                       " != V_I rows " + std::to_string(v_i.extent(0)));
    }
    auto keys = concat<T>({k_i, k0}, 0);
    auto vals = concat<T>({v_i, v0}, 0);
    return attend(q0, keys, vals, head_dim);
}

// Frame i >= 1: attention weights against the ORIGINAL keys [K_0; K_{i-1}],
// values mixed as [V_0^new; V_{i-1}].
template <class T>
Tensor<T> propagate_to_frame(const Tensor<T>& qi, const Tensor<T>& k0, const Tensor<T>& k_prev,
                             const Tensor<T>& v0_new, const Tensor<T>& v_prev, int head_dim) {
    if (v0_new.extent(0) != k0.extent(0)) {
        fail(ErrorKind::dimension, "propagate_to_frame: V_0^new rows " + std::to_string(v0_new.extent(0)) +
                                       " != K_0 rows " + std::to_string(k0.extent(0)));
    }
    if (v_prev.extent(0) != k_prev.extent(0)) {
        fail(ErrorKind::dimension, "propagate_to_frame: V_{i-1} rows " + std::to_string(v_prev.extent(0)) +
                                       " != K_{i-1} rows " + std::to_string(k_prev.extent(0)));
    }
    auto keys = concat<T>({k0, k_prev}, 0);
    auto vals = concat<T>({v0_new, v_prev}, 0);
    return attend(qi, keys, vals, head_dim);
}

// Full injected cross-frame attention over [F, tokens, C] hidden states.
// Disabled injection takes the exact base code path, so outputs are bitwise
// identical to cross_frame_attention_base.
template <class T>
Tensor<T> injected_cross_frame_attention(const Tensor<T>& x, const Tensor<T>& prompt_features,
                                         const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv,
                                         const Tensor<T>& wo, const Tensor<T>& w_ki, const Tensor<T>& w_vi,
                                         int head_dim, const InjectionSettings& settings) {
    if (!settings.enabled) return cross_frame_attention_base(x, wq, wk, wv, wo, head_dim);
    if (!prompt_features.defined()) {
        fail(ErrorKind::state, "injection enabled but no prompt pyramid level supplied");
    }
    if (x.rank() != 3) fail(ErrorKind::dimension, "injected_cross_frame_attention: need [F, tokens, C]");
    const std::int64_t F = x.extent(0), Tn = x.extent(1), C = x.extent(2);
    auto q = matmul(x, wq);
    auto k = matmul(x, wk);
    auto v = matmul(x, wv);
    auto frame = [&](const Tensor<T>& t, std::int64_t i) { return reshape(slice(t, 0, i, 1), {Tn, C}); };
    auto [k_i, v_i] = project_prompt(prompt_features, w_ki, w_vi);

    auto k0 = frame(k, 0);
    auto v0 = frame(v, 0);
    Tensor<T> v0_new = update_first_frame(frame(q, 0), k0, v0, k_i, v_i, head_dim);
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(F));
    outs.push_back(reshape(v0_new, {1, Tn, C}));
    Tensor<T> prev_updated = v0_new;
    for (std::int64_t i = 1; i < F; ++i) {
        Tensor<T> v_prev = settings.recursive ? prev_updated : frame(v, i - 1);
        Tensor<T> out_i = propagate_to_frame(frame(q, i), k0, frame(k, i - 1), v0_new, v_prev, head_dim);
        outs.push_back(reshape(out_i, {1, Tn, C}));
        prev_updated = out_i;
    }
    return matmul(concat(outs, 0), wo);
}

} // namespace promptvid
