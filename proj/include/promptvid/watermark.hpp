#pragma once

// Residual output refiner: a six-block mini U-Net spliced in right before the
// backbone's final convolution. Two downsampling blocks (each halving H and
// W), two enhancement blocks at the bottom resolution, and two upsampling
// blocks with skip connections back to the matching downsampling block. Each
// block carries two ResNet blocks. The final convolution is zero-initialized,
// so a freshly built refiner is an exact no-op on every input.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "promptvid/errors.hpp"
#include "promptvid/param_store.hpp"
#include "promptvid/rng.hpp"
#include "promptvid/tensor.hpp"
#include "promptvid/unet.hpp"

namespace promptvid {

struct RefinerConfig {
    int in_channels = 0;              // channel count of the features it refines
    std::vector<int> block_widths;    // {down-level 0, down-level 1, enhancement}

    void validate() const {
        if (in_channels < 1) fail(ErrorKind::config, "refiner in_channels must be >= 1");
        if (block_widths.size() != 3) {
            fail(ErrorKind::config, "refiner needs exactly three block widths, got " +
                                        std::to_string(block_widths.size()));
        }
        for (int w : block_widths)
            if (w < 1) fail(ErrorKind::config, "refiner block widths must be >= 1");
    }

    std::string canonical_string() const {
        std::string s = "refiner;in=" + std::to_string(in_channels) + ";widths=";
        for (std::size_t i = 0; i < block_widths.size(); ++i)
            s += (i ? "," : "") + std::to_string(block_widths[i]);
        return s;
    }
};

// Widths follow the backbone's channel progression off its level-0 width.
inline RefinerConfig default_refiner_config(const UNetConfig& unet) {
    const int c0 = unet.channels(0);
    return RefinerConfig{c0, {c0, 2 * c0, 4 * c0}};
}

namespace refinerdetail {

// GroupNorm -> affine -> SiLU -> conv twice, plus skip (1x1 conv on channel
// change). Same structure as the backbone's residual block minus the
// timestep pathway; convolutions are per-frame (temporal kernel 1).
template <class T>
void create_plain_resblock(ParameterStore<T>& store, const RngStream& root, const std::string& prefix,
                           int cin, int cout, StageTag tag) {
    store.create_full(prefix + "/gn1/gamma", {cin}, T(1), tag);
    store.create_zeros(prefix + "/gn1/beta", {cin}, tag);
    store.create_normal(prefix + "/conv1/w", {cout, cin, 1, 3, 3}, root,
                        1.0 / std::sqrt(static_cast<double>(cin * 9)), tag);
    store.create_zeros(prefix + "/conv1/b", {cout}, tag);
    store.create_full(prefix + "/gn2/gamma", {cout}, T(1), tag);
    store.create_zeros(prefix + "/gn2/beta", {cout}, tag);
    store.create_normal(prefix + "/conv2/w", {cout, cout, 1, 3, 3}, root,
                        1.0 / std::sqrt(static_cast<double>(cout * 9)), tag);
    store.create_zeros(prefix + "/conv2/b", {cout}, tag);
    if (cin != cout) {
        store.create_normal(prefix + "/skip/w", {cout, cin, 1, 1, 1}, root,
                            1.0 / std::sqrt(static_cast<double>(cin)), tag);
        store.create_zeros(prefix + "/skip/b", {cout}, tag);
    }
}

template <class T>
Tensor<T> plain_resblock(const ParameterStore<T>& store, const std::string& prefix, const Tensor<T>& x) {
    const auto w1 = store.get(prefix + "/conv1/w");
    if (x.rank() != 5 || x.extent(1) != w1.extent(1)) {
        fail(ErrorKind::dimension, "refiner block '" + prefix + "' expects " +
                                       std::to_string(w1.extent(1)) + " channels, got input " +
                                       to_string(x.shape()));
    }
    auto h = channel_affine(group_norm(x, unetdetail::norm_groups(static_cast<int>(x.extent(1)))),
                            store.get(prefix + "/gn1/gamma"), store.get(prefix + "/gn1/beta"));
    h = conv3d(silu(h), w1, store.get(prefix + "/conv1/b"), Conv3dSpec::same(1, 3, 3));
    h = channel_affine(group_norm(h, unetdetail::norm_groups(static_cast<int>(h.extent(1)))),
                       store.get(prefix + "/gn2/gamma"), store.get(prefix + "/gn2/beta"));
    h = conv3d(silu(h), store.get(prefix + "/conv2/w"), store.get(prefix + "/conv2/b"),
               Conv3dSpec::same(1, 3, 3));
    Tensor<T> skip = x;
    if (store.has(prefix + "/skip/w")) {
        skip = conv3d(x, store.get(prefix + "/skip/w"), store.get(prefix + "/skip/b"), Conv3dSpec{});
    }
    return add(h, skip);
}

// Block layout in creation and traversal order. Each entry is
// {prefix, cin of rb0, width}; rb1 always maps width -> width.
struct BlockSpec {
    std::string prefix;
    int cin = 0;
    int width = 0;
};

inline std::vector<BlockSpec> block_specs(const RefinerConfig& cfg) {
    const int c = cfg.in_channels;
    const int w0 = cfg.block_widths[0], w1 = cfg.block_widths[1], w2 = cfg.block_widths[2];
    return {
        {"refiner/d0", c, w0},       {"refiner/d1", w0, w1},      {"refiner/e0", w1, w2},
        {"refiner/e1", w2, w2},      {"refiner/u1", w2 + w1, w1}, {"refiner/u0", w1 + w0, w0},
    };
}

} // namespace refinerdetail

// Creates all refiner parameters under the refiner stage tag. The final
// convolution (weight and bias) is zero-initialized, which makes the whole
// module output exactly zero until it is trained.
template <class T>
void build_refiner(const RefinerConfig& cfg, ParameterStore<T>& store, const RngStream& root) {
    cfg.validate();
    for (const auto& b : refinerdetail::block_specs(cfg)) {
        refinerdetail::create_plain_resblock(store, root, b.prefix + "/rb0", b.cin, b.width,
                                             StageTag::refiner);
        refinerdetail::create_plain_resblock(store, root, b.prefix + "/rb1", b.width, b.width,
                                             StageTag::refiner);
    }
    store.create_zeros("refiner/out/w", {cfg.in_channels, cfg.block_widths[0], 1, 3, 3},
                       StageTag::refiner);
    store.create_zeros("refiner/out/b", {cfg.in_channels}, StageTag::refiner);
}

// Closed-form parameter count for a given config; kept in sync with
// build_refiner by the tests.
inline std::int64_t refiner_param_count(const RefinerConfig& cfg) {
    cfg.validate();
    auto rb = [](std::int64_t ci, std::int64_t co) {
        std::int64_t n = 2 * ci + 9 * co * ci + co + 2 * co + 9 * co * co + co;
        if (ci != co) n += co * ci + co;
        return n;
    };
    std::int64_t total = 0;
    for (const auto& b : refinerdetail::block_specs(cfg)) {
        total += rb(b.cin, b.width) + rb(b.width, b.width);
    }
    total += 9 * static_cast<std::int64_t>(cfg.in_channels) * cfg.block_widths[0] + cfg.in_channels;
    return total;
}

// The residual the refiner adds: a full pass over [1, C, F, H, W] features.
// H and W must be divisible by 4 so two halvings round-trip exactly.
template <class T>
Tensor<T> refiner_residual(const RefinerConfig& cfg, const ParameterStore<T>& store, const Tensor<T>& x) {
    cfg.validate();
    if (x.rank() != 5 || x.extent(1) != cfg.in_channels) {
        fail(ErrorKind::dimension, "refiner expects [1," + std::to_string(cfg.in_channels) +
                                       ",F,H,W] features, got " + to_string(x.shape()));
    }
    if (x.extent(3) % 4 != 0 || x.extent(4) % 4 != 0) {
        fail(ErrorKind::dimension, "refiner needs H and W divisible by 4, got " + to_string(x.shape()));
    }
    auto h = refinerdetail::plain_resblock(store, "refiner/d0/rb0", x);
    h = refinerdetail::plain_resblock(store, "refiner/d0/rb1", h);
    auto skip0 = h;
    h = resample2x_down(h);
    h = refinerdetail::plain_resblock(store, "refiner/d1/rb0", h);
    h = refinerdetail::plain_resblock(store, "refiner/d1/rb1", h);
    auto skip1 = h;
    h = resample2x_down(h);
    h = refinerdetail::plain_resblock(store, "refiner/e0/rb0", h);
    h = refinerdetail::plain_resblock(store, "refiner/e0/rb1", h);
    h = refinerdetail::plain_resblock(store, "refiner/e1/rb0", h);
    h = refinerdetail::plain_resblock(store, "refiner/e1/rb1", h);
    h = resample2x_up(h);
    h = concat<T>({h, skip1}, 1);
    h = refinerdetail::plain_resblock(store, "refiner/u1/rb0", h);
    h = refinerdetail::plain_resblock(store, "refiner/u1/rb1", h);
    h = resample2x_up(h);
    h = concat<T>({h, skip0}, 1);
    h = refinerdetail::plain_resblock(store, "refiner/u0/rb0", h);
    h = refinerdetail::plain_resblock(store, "refiner/u0/rb1", h);
    return conv3d(h, store.get("refiner/out/w"), store.get("refiner/out/b"), Conv3dSpec::same(1, 3, 3));
}

// features' = features + refiner(features); the result feeds the backbone's
// final convolution.
template <class T>
Tensor<T> apply_refined_output(const RefinerConfig& cfg, const ParameterStore<T>& store,
                               const Tensor<T>& features) {
    return add(features, refiner_residual(cfg, store, features));
}

} // namespace promptvid
