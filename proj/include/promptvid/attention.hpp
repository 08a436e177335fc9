#pragma once

// Multi-head scaled dot-product attention primitives and the three attention
// ops used by the video backbone: cross-frame attention (each frame attends
// to frame 0 and its predecessor), temporal attention (per spatial token,
// across frames, residual inside), and text cross-attention (keys/values from
// the composed condition, pads masked out).
//
// Ops here take explicit weight tensors and are pure functions, which keeps
// them directly comparable against brute-force enumeration oracles.

#include <cstdint>
#include <string>
#include <vector>

#include "promptvid/conditioning.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

namespace detail {

inline int head_count(std::int64_t channels, int head_dim, const char* where) {
    if (head_dim < 1 || channels % head_dim != 0) {
        fail(ErrorKind::dimension, std::string(where) + ": head_dim " + std::to_string(head_dim) +
                                       " does not divide channel count " + std::to_string(channels));
    }
    return static_cast<int>(channels / head_dim);
}

} // namespace detail

// [rows, C] -> [heads, rows, d]
template <class T>
Tensor<T> split_heads(const Tensor<T>& x, int head_dim) {
    const int h = detail::head_count(x.extent(1), head_dim, "split_heads");
    return permute(reshape(x, {x.extent(0), h, head_dim}), {1, 0, 2});
}

// [heads, rows, d] -> [rows, C]
template <class T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    return reshape(permute(x, {1, 0, 2}), {x.extent(1), x.extent(0) * x.extent(2)});
}

// Attention of q rows over explicit key/value rows: softmax(q k^T / sqrt(d)) v,
// evaluated per head. keys and vals must agree on row count.
template <class T>
Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& keys, const Tensor<T>& vals, int head_dim) {
    if (q.rank() != 2 || keys.rank() != 2 || vals.rank() != 2 || q.extent(1) != keys.extent(1) ||
        keys.extent(1) != vals.extent(1)) {
        fail(ErrorKind::dimension, "attend: q " + to_string(q.shape()) + ", keys " + to_string(keys.shape()) +
                                       ", vals " + to_string(vals.shape()));
    }
    if (keys.extent(0) != vals.extent(0)) {
        fail(ErrorKind::dimension, "attend: key rows " + std::to_string(keys.extent(0)) +
                                       " != value rows " + std::to_string(vals.extent(0)));
    }
    if (keys.extent(0) < 1) fail(ErrorKind::dimension, "attend: no keys to attend over");
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    auto qh = split_heads(q, head_dim);
    auto kh = split_heads(keys, head_dim);
    auto vh = split_heads(vals, head_dim);
    auto w = softmax_lastdim(mul_scalar(matmul(qh, transpose_last2(kh)), scale));
    return merge_heads(matmul(w, vh));
}

// Base cross-frame attention over hidden states [F, tokens, C]. Frame 0
// attends to its own keys/values only; frame i >= 1 attends over the
// concatenation [K_0, K_{i-1}] / [V_0, V_{i-1}]. Output projection applied,
// no residual (the backbone wrapper owns pre-norm and residual).
template <class T>
Tensor<T> cross_frame_attention_base(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk,
                                     const Tensor<T>& wv, const Tensor<T>& wo, int head_dim) {
    if (x.rank() != 3) fail(ErrorKind::dimension, "cross_frame_attention_base: need [F, tokens, C]");
    const std::int64_t F = x.extent(0), Tn = x.extent(1), C = x.extent(2);
    auto q = matmul(x, wq);
    auto k = matmul(x, wk);
    auto v = matmul(x, wv);
    auto frame = [&](const Tensor<T>& t, std::int64_t i) { return reshape(slice(t, 0, i, 1), {Tn, C}); };
    std::vector<Tensor<T>> outs;
    outs.reserve(static_cast<std::size_t>(F));
    for (std::int64_t i = 0; i < F; ++i) {
        Tensor<T> keys = frame(k, 0);
        Tensor<T> vals = frame(v, 0);
        if (i > 0) {
            keys = concat<T>({keys, frame(k, i - 1)}, 0);
            vals = concat<T>({vals, frame(v, i - 1)}, 0);
        }
        outs.push_back(reshape(attend(frame(q, i), keys, vals, head_dim), {1, Tn, C}));
    }
    return matmul(concat(outs, 0), wo);
}

// Temporal attention: each spatial token attends across all frames.
// Residual is part of the op: out = x + (attention output) wo.
template <class T>
Tensor<T> temporal_attention(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& wk,
                             const Tensor<T>& wv, const Tensor<T>& wo, int head_dim) {
    if (x.rank() != 3) fail(ErrorKind::dimension, "temporal_attention: need [F, tokens, C]");
    const std::int64_t F = x.extent(0), Tn = x.extent(1), C = x.extent(2);
    const int h = detail::head_count(C, head_dim, "temporal_attention");
    auto xt = permute(x, {1, 0, 2}); // [T, F, C]
    auto heads = [&](const Tensor<T>& w) {
        return permute(reshape(matmul(xt, w), {Tn, F, h, head_dim}), {0, 2, 1, 3}); // [T, h, F, d]
    };
    auto qh = heads(wq), kh = heads(wk), vh = heads(wv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    auto w = softmax_lastdim(mul_scalar(matmul(qh, transpose_last2(kh)), scale)); // [T, h, F, F]
    auto out = reshape(permute(matmul(w, vh), {0, 2, 1, 3}), {Tn, F, C});
    return add(x, permute(matmul(out, wo), {1, 0, 2}));
}

// Text cross-attention: queries from hidden states, keys/values from the
// composed condition. Pad positions receive a large negative logit offset so
// their post-softmax weight underflows to exactly zero.
template <class T>
Tensor<T> cross_attention_text(const Tensor<T>& x, const ComposedCondition<T>& cond,
                               const Tensor<T>& wq, const Tensor<T>& wk, const Tensor<T>& wv,
                               const Tensor<T>& wo, int head_dim) {
    if (x.rank() != 3) fail(ErrorKind::dimension, "cross_attention_text: need [F, tokens, C]");
    const std::int64_t F = x.extent(0), Tn = x.extent(1), C = x.extent(2);
    const std::int64_t L = cond.embeddings.extent(0);
    if (cond.embeddings.rank() != 2 || cond.embeddings.extent(1) != wk.extent(0)) {
        fail(ErrorKind::dimension, "cross_attention_text: condition width " +
                                       to_string(cond.embeddings.shape()) + " does not match K projection " +
                                       to_string(wk.shape()));
    }
    if (static_cast<std::int64_t>(cond.pad_mask.size()) != L) {
        fail(ErrorKind::contract, "cross_attention_text: pad mask length mismatch");
    }
    bool any_real = false;
    for (auto p : cond.pad_mask) any_real = any_real || !p;
    if (!any_real) fail(ErrorKind::contract, "cross_attention_text: condition has no unmasked tokens");

    const int h = detail::head_count(C, head_dim, "cross_attention_text");
    auto qh = permute(reshape(matmul(x, wq), {F, Tn, h, head_dim}), {0, 2, 1, 3}); // [F, h, T, d]
    auto kh = split_heads(matmul(cond.embeddings, wk), head_dim);                  // [h, L, d]
    auto vh = split_heads(matmul(cond.embeddings, wv), head_dim);
    const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    auto logits = mul_scalar(matmul(qh, transpose_last2(kh)), scale); // [F, h, T, L]

    // additive mask; -1e30 underflows to weight 0 after the stabilized softmax
    std::vector<T> mask(static_cast<std::size_t>(F * h * Tn * L), T(0));
    for (std::int64_t i = 0; i < F * h * Tn; ++i)
        for (std::int64_t j = 0; j < L; ++j)
            if (cond.pad_mask[static_cast<std::size_t>(j)])
                mask[static_cast<std::size_t>(i * L + j)] = static_cast<T>(-1e30);
    logits = add(logits, Tensor<T>::from(logits.shape(), std::move(mask)));

    auto w = softmax_lastdim(logits);
    auto out = reshape(permute(matmul(w, vh), {0, 2, 1, 3}), {F, Tn, C});
    return matmul(out, wo);
}

} // namespace promptvid
