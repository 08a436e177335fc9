// Acceptance gate: eight pass/fail checks covering the attention oracles,
// gradient correctness, forward-noising statistics, no-op guarantees, stage
// gating, the end-to-end ablation ordering, the dataset protocol, and
// sampling determinism. Prints one line per criterion and exits nonzero if
// any of them fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "promptvid/cli.hpp"
#include "promptvid/dataset.hpp"
#include "promptvid/engine.hpp"
#include "promptvid/injection.hpp"
#include "promptvid/metrics.hpp"
#include "promptvid/trainer.hpp"
#include "promptvid/watermark.hpp"

using namespace promptvid;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// pinned tolerances
constexpr double kAttnTol = 1e-6;       // criterion 1: max abs diff, float engine vs double oracle
constexpr double kGradRelTol = 1e-4;    // criterion 2: relative error of analytic vs central FD
constexpr double kGradFloor = 1e-2;     // criterion 2: denominator floor for near-zero gradients
constexpr double kGradH = 1e-3;         // criterion 2: central-difference step
constexpr double kStatSigmas = 3.0;     // criterion 3: tolerance in standard errors
constexpr int kNoisings = 10000;        // criterion 3: draws per timestep

static int g_failures = 0;

static void report(int idx, bool pass, const std::string& detail) {
    std::printf("criterion %d: %s  %s\n", idx, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

static std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// ---------------------------------------------------------------------------
// criterion 1: attention ops vs brute-force enumeration oracles
// ---------------------------------------------------------------------------
// The engine runs in float; the oracles below recompute every op with plain
// double loops and std::exp softmax, independent of the tensor library.

namespace oracle {

std::vector<double> to_d(const Tensor<float>& t) {
    const auto& v = t.values();
    return std::vector<double>(v.begin(), v.end());
}

// [m,p] x [p,n]
std::vector<double> mm(const std::vector<double>& a, int m, int p, const std::vector<double>& b,
                       int n) {
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int k = 0; k < p; ++k) {
            const double av = a[static_cast<std::size_t>(i) * p + k];
            for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(i) * n + j] += av * b[static_cast<std::size_t>(k) * n + j];
        }
    return out;
}

// softmax(q k^T / sqrt(hd)) v per head; q [qr,C], k/v [kr,C]
std::vector<double> attend(const std::vector<double>& q, int qr, const std::vector<double>& k,
                           const std::vector<double>& v, int kr, int C, int hd) {
    const int heads = C / hd;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<double> out(static_cast<std::size_t>(qr) * C, 0.0);
    std::vector<double> logits(static_cast<std::size_t>(kr));
    for (int h = 0; h < heads; ++h) {
        const int off = h * hd;
        for (int i = 0; i < qr; ++i) {
            for (int j = 0; j < kr; ++j) {
                double dot = 0.0;
                for (int d = 0; d < hd; ++d)
                    dot += q[static_cast<std::size_t>(i) * C + off + d] * k[static_cast<std::size_t>(j) * C + off + d];
                logits[static_cast<std::size_t>(j)] = dot * scale;
            }
            double mx = logits[0];
            for (int j = 1; j < kr; ++j) mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
            double norm = 0.0;
            for (int j = 0; j < kr; ++j) {
                logits[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)] - mx);
                norm += logits[static_cast<std::size_t>(j)];
            }
            for (int j = 0; j < kr; ++j) {
                const double w = logits[static_cast<std::size_t>(j)] / norm;
                for (int d = 0; d < hd; ++d)
                    out[static_cast<std::size_t>(i) * C + off + d] += w * v[static_cast<std::size_t>(j) * C + off + d];
            }
        }
    }
    return out;
}

std::vector<double> rows(const std::vector<double>& m, int row0, int nrows, int C) {
    return std::vector<double>(m.begin() + static_cast<std::ptrdiff_t>(row0) * C,
                               m.begin() + static_cast<std::ptrdiff_t>(row0 + nrows) * C);
}

std::vector<double> vcat(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

double max_abs_diff(const Tensor<float>& got, const std::vector<double>& want) {
    const auto& g = got.values();
    double m = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(g[i]) - want[i]));
    return m;
}

} // namespace oracle

static void criterion1() {
    const auto t0 = Clock::now();
    RngStream rng(4101);
    const int kInstances = 200;
    double worst = 0.0;
    std::string worst_op = "none";
    auto track = [&](const char* op, double d) {
        if (d > worst) {
            worst = d;
            worst_op = op;
        }
    };

    for (int inst = 0; inst < kInstances; ++inst) {
        const int hd = 1 << rng.uniform_index(4);            // 1, 2, 4, 8
        const int heads = 1 + static_cast<int>(rng.uniform_index(2));
        const int C = hd * heads;
        const int F = 1 + static_cast<int>(rng.uniform_index(4));
        const int Tn = 1 + static_cast<int>(rng.uniform_index(6));
        // projections at init scale (1/sqrt(fan-in), as the backbone creates
        // them) keep logits O(1); unit-scale weights would push logits to
        // +-25 where float rounding alone exceeds the tolerance
        auto mat = [&](int r, int c) {
            return Tensor<float>::randn({r, c}, rng, 1.0 / std::sqrt(static_cast<double>(r)));
        };

        // shared projection weights and hidden states
        auto x = Tensor<float>::randn({F, Tn, C}, rng, 0.5);
        auto wq = mat(C, C), wk = mat(C, C), wv = mat(C, C), wo = mat(C, C);
        const auto xd = oracle::to_d(x);
        const auto q = oracle::mm(xd, F * Tn, C, oracle::to_d(wq), C);
        const auto k = oracle::mm(xd, F * Tn, C, oracle::to_d(wk), C);
        const auto v = oracle::mm(xd, F * Tn, C, oracle::to_d(wv), C);

        {
            // cross-frame attention: frame 0 self-only, frame i over [K_0; K_{i-1}]
            std::vector<double> merged;
            for (int i = 0; i < F; ++i) {
                auto keys = oracle::rows(k, 0, Tn, C);
                auto vals = oracle::rows(v, 0, Tn, C);
                if (i > 0) {
                    keys = oracle::vcat(keys, oracle::rows(k, (i - 1) * Tn, Tn, C));
                    vals = oracle::vcat(vals, oracle::rows(v, (i - 1) * Tn, Tn, C));
                }
                auto oi = oracle::attend(oracle::rows(q, i * Tn, Tn, C), Tn, keys, vals,
                                         static_cast<int>(keys.size()) / C, C, hd);
                merged.insert(merged.end(), oi.begin(), oi.end());
            }
            const auto want = oracle::mm(merged, F * Tn, C, oracle::to_d(wo), C);
            track("cross_frame", oracle::max_abs_diff(
                                     cross_frame_attention_base(x, wq, wk, wv, wo, hd), want));
        }
        {
            // temporal attention: per spatial token across frames, residual inside
            std::vector<double> want(xd);
            for (int tn = 0; tn < Tn; ++tn) {
                std::vector<double> qf(static_cast<std::size_t>(F) * C), kf(qf.size()), vf(qf.size());
                for (int f = 0; f < F; ++f)
                    for (int c = 0; c < C; ++c) {
                        qf[static_cast<std::size_t>(f) * C + c] = q[(static_cast<std::size_t>(f) * Tn + tn) * C + c];
                        kf[static_cast<std::size_t>(f) * C + c] = k[(static_cast<std::size_t>(f) * Tn + tn) * C + c];
                        vf[static_cast<std::size_t>(f) * C + c] = v[(static_cast<std::size_t>(f) * Tn + tn) * C + c];
                    }
                const auto attn = oracle::attend(qf, F, kf, vf, F, C, hd);
                const auto proj = oracle::mm(attn, F, C, oracle::to_d(wo), C);
                for (int f = 0; f < F; ++f)
                    for (int c = 0; c < C; ++c)
                        want[(static_cast<std::size_t>(f) * Tn + tn) * C + c] += proj[static_cast<std::size_t>(f) * C + c];
            }
            track("temporal", oracle::max_abs_diff(temporal_attention(x, wq, wk, wv, wo, hd), want));
        }
        {
            // text cross-attention; the oracle enumerates only unmasked tokens
            const int L = 2 + static_cast<int>(rng.uniform_index(15));
            const int d_txt = 2 + static_cast<int>(rng.uniform_index(7));
            ComposedCondition<float> cond;
            cond.embeddings = Tensor<float>::randn({L, d_txt}, rng, 0.5);
            cond.pad_mask.resize(static_cast<std::size_t>(L));
            int real = 0;
            for (auto& p : cond.pad_mask) {
                p = rng.uniform_index(3) == 0 ? 1 : 0;
                real += p ? 0 : 1;
            }
            if (real == 0) cond.pad_mask[0] = 0;
            auto wkt = mat(d_txt, C), wvt = mat(d_txt, C);
            const auto kt = oracle::mm(oracle::to_d(cond.embeddings), L, d_txt, oracle::to_d(wkt), C);
            const auto vt = oracle::mm(oracle::to_d(cond.embeddings), L, d_txt, oracle::to_d(wvt), C);
            std::vector<double> kr, vr;
            for (int l = 0; l < L; ++l)
                if (!cond.pad_mask[static_cast<std::size_t>(l)]) {
                    kr = oracle::vcat(kr, oracle::rows(kt, l, 1, C));
                    vr = oracle::vcat(vr, oracle::rows(vt, l, 1, C));
                }
            const auto attn = oracle::attend(q, F * Tn, kr, vr, static_cast<int>(kr.size()) / C, C, hd);
            const auto want = oracle::mm(attn, F * Tn, C, oracle::to_d(wo), C);
            track("text", oracle::max_abs_diff(
                              cross_attention_text(x, cond, wq, wkt, wvt, wo, hd), want));
        }
        {
            // first-frame update: Q_0 over [K_I; K_0] / [V_I; V_0]
            const int P = 1 + static_cast<int>(rng.uniform_index(5));
            auto vec = [&](int r) { return Tensor<float>::randn({r, C}, rng, 0.5); };
            auto q0 = vec(Tn), k0 = vec(Tn), v0 = vec(Tn);
            auto ki = vec(P), vi = vec(P);
            const auto want = oracle::attend(
                oracle::to_d(q0), Tn, oracle::vcat(oracle::to_d(ki), oracle::to_d(k0)),
                oracle::vcat(oracle::to_d(vi), oracle::to_d(v0)), P + Tn, C, hd);
            track("first_frame", oracle::max_abs_diff(update_first_frame(q0, k0, v0, ki, vi, hd), want));
        }
        {
            // propagation: weights from [K_0; K_prev], values [V_0^new; V_prev]
            auto vec = [&](int r) { return Tensor<float>::randn({r, C}, rng, 0.5); };
            auto qi = vec(Tn), k0 = vec(Tn), kp = vec(Tn), vn = vec(Tn), vp = vec(Tn);
            const auto want = oracle::attend(
                oracle::to_d(qi), Tn, oracle::vcat(oracle::to_d(k0), oracle::to_d(kp)),
                oracle::vcat(oracle::to_d(vn), oracle::to_d(vp)), 2 * Tn, C, hd);
            track("propagate", oracle::max_abs_diff(propagate_to_frame(qi, k0, kp, vn, vp, hd), want));
        }
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    report(1, worst < kAttnTol,
           fmt("attention ops vs brute-force oracles: 5 ops x %d instances, max |diff| %.3g (worst op %s, tol %.0e, %.1fs)",
               kInstances, worst, worst_op.c_str(), kAttnTol, secs));
}

// ---------------------------------------------------------------------------
// criterion 2: analytic gradients vs central finite differences
// ---------------------------------------------------------------------------

namespace gradcheck {

struct Setup {
    UNetConfig unet;
    NoiseSchedule sched;
    EncoderConfig enc;
    Tensor<double> x_t;
    Tensor<double> target_eps;
    Tensor<double> coarse_feature;
    Tensor<double> prompt_latent;
    TextTokenSeq tokens;
    int t = 3, k = 1, n = 2;
};

// Loss at the store's current parameter values. Everything downstream of the
// trainables is rebuilt per call: the mapped image embedding, the fused
// condition, and the prompt pyramid.
double loss_at(const Setup& s, const Conditioning<double>& cond_enc, ParameterStore<double>& store,
               const EngineFlags& flags) {
    auto f_t = cond_enc.encode_text(s.tokens);
    auto f_i = cond_enc.map_to_text_space(store, s.coarse_feature);
    auto cond = cond_enc.fuse(f_t, s.tokens, f_i, s.k, s.n);
    RngStream pr(99);
    auto prompt_eps = Tensor<double>::randn(s.prompt_latent.shape(), pr);
    auto noisy_prompt = forward_noise(s.sched, s.prompt_latent, s.t, prompt_eps);
    auto pyramid = extract_prompt_pyramid(s.unet, store, noisy_prompt, s.t);
    auto eps_hat = predict_epsilon(s.unet, store, s.sched, s.x_t, s.t, cond, &pyramid, flags);
    return static_cast<double>(epsilon_loss(eps_hat, s.target_eps).scalar());
}

} // namespace gradcheck

static void criterion2() {
    const auto t0 = Clock::now();
    gradcheck::Setup s;
    s.unet.base_channels = 4;
    s.unet.channel_multipliers = {1, 2};
    s.unet.frames = 2;
    s.unet.latent_h = s.unet.latent_w = 8;
    s.unet.latent_channels = 4;
    s.unet.attention_levels = {0, 1};
    s.unet.head_dim = 2;
    s.sched = build_schedule(8, 0.05, 0.3);
    s.enc.vocab_size = 40;
    s.enc.d_txt = 6;
    s.enc.image_patch = 2;
    s.enc.d_img = 8;
    s.enc.max_tokens = 8;
    const Conditioning<double> cond_enc(s.enc);

    ParameterStore<double> store;
    RngStream root(2202);
    create_unet_params(s.unet, s.enc.d_txt, store, root.split(fnv1a("init/unet")));
    cond_enc.create_mapper_params(store, root.split(fnv1a("init/mapper")));
    create_injection_params(s.unet, store);

    // Evaluate away from the init point: zero-initialized tensors (mapper
    // second layer, injection copies of freshly trained nothing) sit at
    // measure-zero configurations where some gradients vanish identically.
    RngStream jig(707);
    std::vector<std::string> trainables;
    for (StageTag tag : {StageTag::stage1, StageTag::stage2}) {
        for (const auto& name : store.names_with_tag(tag)) trainables.push_back(name);
    }
    std::sort(trainables.begin(), trainables.end());
    for (const auto& name : trainables) {
        auto p = store.get(name);
        auto noise = Tensor<double>::randn(p.shape(), jig, 0.05);
        store.set_value(name, add(p, noise).detach());
    }

    RngStream data(313);
    auto x0 = Tensor<double>::randn({4, 2, 8, 8}, data, 0.8);
    auto eps = Tensor<double>::randn({4, 2, 8, 8}, data);
    s.x_t = forward_noise(s.sched, x0, s.t, eps);
    s.target_eps = eps;
    s.coarse_feature = Tensor<double>::randn({s.enc.d_img}, data);
    s.prompt_latent = Tensor<double>::randn({4, 8, 8}, data, 0.6);
    s.tokens.token_ids = {5, 9, 12, 0, 0, 0, 0, 0};
    s.tokens.pad_mask = {0, 0, 0, 1, 1, 1, 1, 1};

    int coords_checked = 0;
    double worst_rel = 0.0;
    std::string worst_name = "none";
    // Both propagation variants differentiate through different value paths,
    // so run the whole check under each.
    for (const bool recursive : {false, true}) {
        EngineFlags flags;
        flags.injection.enabled = true;
        flags.injection.recursive = recursive;

        // analytic gradients at the base point
        std::map<std::string, std::vector<double>> analytic;
        {
            for (const auto& name : trainables) store.get(name).set_requires_grad(true);
            auto f_t = cond_enc.encode_text(s.tokens);
            auto f_i = cond_enc.map_to_text_space(store, s.coarse_feature);
            auto cond = cond_enc.fuse(f_t, s.tokens, f_i, s.k, s.n);
            RngStream pr(99);
            auto prompt_eps = Tensor<double>::randn(s.prompt_latent.shape(), pr);
            auto noisy_prompt = forward_noise(s.sched, s.prompt_latent, s.t, prompt_eps);
            auto pyramid = extract_prompt_pyramid(s.unet, store, noisy_prompt, s.t);
            auto eps_hat = predict_epsilon(s.unet, store, s.sched, s.x_t, s.t, cond, &pyramid, flags);
            auto loss = epsilon_loss(eps_hat, s.target_eps);
            backward(loss);
            for (const auto& name : trainables) {
                auto p = store.get(name);
                analytic[name] = p.has_grad()
                                     ? std::vector<double>(p.grad().begin(), p.grad().end())
                                     : std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0);
                store.set_value(name, p.detach()); // drop graph and grad state
            }
        }

        RngStream pick(recursive ? 515 : 414);
        for (const auto& name : trainables) {
            auto p = store.get(name);
            const std::int64_t n = p.numel();
            const int per_tensor = 5;
            for (int c = 0; c < per_tensor; ++c) {
                const std::int64_t idx = static_cast<std::int64_t>(pick.uniform_index(static_cast<std::uint64_t>(n)));
                auto vals = p.values();
                const double orig = vals[static_cast<std::size_t>(idx)];
                vals[static_cast<std::size_t>(idx)] = orig + kGradH;
                store.set_value(name, Tensor<double>::from(p.shape(), std::vector<double>(vals)));
                const double lp = gradcheck::loss_at(s, cond_enc, store, flags);
                vals[static_cast<std::size_t>(idx)] = orig - kGradH;
                store.set_value(name, Tensor<double>::from(p.shape(), std::vector<double>(vals)));
                const double lm = gradcheck::loss_at(s, cond_enc, store, flags);
                vals[static_cast<std::size_t>(idx)] = orig;
                store.set_value(name, Tensor<double>::from(p.shape(), std::move(vals)));

                const double fd = (lp - lm) / (2.0 * kGradH);
                const double an = analytic[name][static_cast<std::size_t>(idx)];
                const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), kGradFloor});
                ++coords_checked;
                if (rel > worst_rel) {
                    worst_rel = rel;
                    worst_name = name + (recursive ? " (recursive)" : "");
                }
            }
        }
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    report(2, worst_rel <= kGradRelTol && coords_checked >= 100,
           fmt("analytic vs central-difference gradients: %d coords over %zu tensors, worst rel err %.3g at %s (tol %.0e, %.1fs)",
               coords_checked, trainables.size(), worst_rel, worst_name.c_str(), kGradRelTol, secs));
}

// ---------------------------------------------------------------------------
// criterion 3: forward-noising statistics
// ---------------------------------------------------------------------------

static void criterion3() {
    const auto t0 = Clock::now();
    const NoiseSchedule sched = build_schedule(40, 0.01, 0.24);
    RngStream data(808);
    const auto x0 = Tensor<double>::randn({4, 2, 4, 4}, data, 0.7);
    const std::int64_t m = x0.numel();

    bool pass = true;
    std::string detail;
    for (const int t : {1, 20, 40}) {
        const double ab = sched.alpha_bar_at(t);
        const double want_var = 1.0 - ab;
        const double sab = std::sqrt(ab);
        RngStream rng(9000 + static_cast<std::uint64_t>(t));
        long double sum = 0.0L, sumsq = 0.0L;
        for (int i = 0; i < kNoisings; ++i) {
            auto eps = Tensor<double>::randn(x0.shape(), rng);
            auto xt = forward_noise(sched, x0, t, eps);
            const auto& xv = xt.values();
            const auto& ov = x0.values();
            for (std::int64_t j = 0; j < m; ++j) {
                const double r = xv[static_cast<std::size_t>(j)] - sab * ov[static_cast<std::size_t>(j)];
                sum += r;
                sumsq += static_cast<long double>(r) * r;
            }
        }
        const double N = static_cast<double>(kNoisings) * static_cast<double>(m);
        const double mean = static_cast<double>(sum / N);
        const double var = static_cast<double>(sumsq / N) - mean * mean;
        const double se_mean = std::sqrt(want_var / N);
        const double se_var = want_var * std::sqrt(2.0 / (N - 1.0));
        const bool mean_ok = std::abs(mean) <= kStatSigmas * se_mean;
        const bool var_ok = std::abs(var - want_var) <= kStatSigmas * se_var;
        pass = pass && mean_ok && var_ok;
        detail += fmt("t=%d |mean|=%.2fse var-dev=%.2fse  ", t, std::abs(mean) / se_mean,
                      std::abs(var - want_var) / se_var);
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    report(3, pass, fmt("forward-noising statistics over %d draws x 3 timesteps within %gse: %s(%.1fs)",
                        kNoisings, kStatSigmas, detail.c_str(), secs));
}

// ---------------------------------------------------------------------------
// criterion 4: zero-injection and no-op guarantees (bitwise)
// ---------------------------------------------------------------------------

template <class T>
static bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.values().data(), b.values().data(), sizeof(T) * a.values().size()) == 0;
}

static void criterion4() {
    const auto t0 = Clock::now();
    UNetConfig u;
    u.base_channels = 4;
    u.channel_multipliers = {1, 2};
    u.frames = 2;
    u.latent_h = u.latent_w = 8;
    u.latent_channels = 4;
    u.attention_levels = {0, 1};
    u.head_dim = 2;
    const NoiseSchedule sched = build_schedule(8, 0.05, 0.3);
    EncoderConfig e;
    e.vocab_size = 40;
    e.d_txt = 6;
    e.image_patch = 2;
    e.d_img = 8;
    e.max_tokens = 8;
    const Conditioning<double> cond_enc(e);

    ParameterStore<double> store;
    RngStream root(6401);
    create_unet_params(u, e.d_txt, store, root.split(fnv1a("init/unet")));
    cond_enc.create_mapper_params(store, root.split(fnv1a("init/mapper")));

    RngStream data(6402);
    auto x_t = Tensor<double>::randn({4, 2, 8, 8}, data);
    TextTokenSeq tokens;
    tokens.token_ids = {3, 7, 2, 0, 0, 0, 0, 0};
    tokens.pad_mask = {0, 0, 0, 1, 1, 1, 1, 1};
    auto f_t = cond_enc.encode_text(tokens);
    auto f_i = cond_enc.map_to_text_space(store, Tensor<double>::randn({e.d_img}, data));
    auto cond = cond_enc.fuse(f_t, tokens, f_i.detach(), 0, 2);

    // (a) disabled injection takes the base code path, before and after the
    // injection parameters exist
    EngineFlags off;
    auto base_out = predict_epsilon(u, store, sched, x_t, 3, cond, nullptr, off);
    auto store_inj = store;
    create_injection_params(u, store_inj);
    auto off_out = predict_epsilon(u, store_inj, sched, x_t, 3, cond, nullptr, off);
    bool a_ok = bitwise_equal(base_out, off_out);
    {
        // op level: disabled injected attention == base attention, bitwise
        RngStream r(6403);
        auto x = Tensor<double>::randn({3, 4, 4}, r);
        auto wq = Tensor<double>::randn({4, 4}, r), wk = Tensor<double>::randn({4, 4}, r);
        auto wv = Tensor<double>::randn({4, 4}, r), wo = Tensor<double>::randn({4, 4}, r);
        auto feats = Tensor<double>::randn({5, 4}, r);
        InjectionSettings noinj;
        a_ok = a_ok && bitwise_equal(injected_cross_frame_attention(x, feats, wq, wk, wv, wo, wk, wv,
                                                                    2, noinj),
                                     cross_frame_attention_base(x, wq, wk, wv, wo, 2));
    }

    // (b) freshly built refiner is an exact no-op end to end
    RefinerConfig rc;
    rc.in_channels = u.channels(0);
    rc.block_widths = {6, 8, 6};
    auto store_ref = store;
    build_refiner(rc, store_ref, RngStream(6404).split(fnv1a("init/refiner")));
    GenerationInputs<double> gin;
    gin.cond = cond;
    EngineFlags with_ref;
    with_ref.use_refiner = true;
    auto lat_ref = generate_video(u, store_ref, sched, gin, with_ref, 777, 4, &rc);
    auto lat_plain = generate_video(u, store_ref, sched, gin, off, 777, 4, &rc);
    const bool b_ok = bitwise_equal(lat_ref, lat_plain) &&
                      bitwise_equal(decode_frames(lat_ref), decode_frames(lat_plain));

    // (c) injection projections at init equal the base K/V projections
    bool c_ok = true;
    for (int level : u.attention_levels) {
        const std::string base = "unet/attn" + std::to_string(level) + "/";
        RngStream r(6500 + static_cast<std::uint64_t>(level));
        auto feats = Tensor<double>::randn({7, u.channels(level)}, r);
        auto [ki, vi] = project_prompt(feats, store_inj.get(base + "wki"), store_inj.get(base + "wvi"));
        c_ok = c_ok && bitwise_equal(ki, matmul(feats, store_inj.get(base + "wk"))) &&
               bitwise_equal(vi, matmul(feats, store_inj.get(base + "wv")));
    }

    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    report(4, a_ok && b_ok && c_ok,
           fmt("no-op guarantees, all bitwise: disabled injection %s, fresh refiner %s, init projections %s (%.1fs)",
               a_ok ? "ok" : "BAD", b_ok ? "ok" : "BAD", c_ok ? "ok" : "BAD", secs));
}

// ---------------------------------------------------------------------------
// criterion 5: stage gating
// ---------------------------------------------------------------------------

static void criterion5() {
    const auto t0 = Clock::now();
    UNetConfig u;
    u.base_channels = 4;
    u.channel_multipliers = {1, 2};
    u.frames = 2;
    u.latent_h = u.latent_w = 8;
    u.latent_channels = 4;
    u.attention_levels = {0, 1};
    u.head_dim = 2;
    const NoiseSchedule sched = build_schedule(8, 0.05, 0.3);

    DatasetConfig d;
    d.frames = 2;
    d.height = d.width = 8;
    d.prompt_size = 8;
    auto records = synth_generate(12, 505, d);
    filter_records(records, d);
    const Vocabulary vocab = dataset_vocabulary(d);
    EncoderConfig e;
    e.vocab_size = vocab.size();
    e.d_txt = 6;
    e.image_patch = 2;
    e.d_img = 8;
    e.max_tokens = 10;
    const Conditioning<double> cond_enc(e);

    std::vector<TrainItem<double>> items;
    for (const auto& r : records) {
        if (r.verdict != Verdict::kept) continue;
        TrainItem<double> it;
        it.latents = encode_frames(r.video);
        it.tokens = vocab.encode(r.caption, e.max_tokens);
        auto prompt = extract_prompt_image(r, 8);
        it.k = r.k;
        it.n = r.n;
        it.coarse_feature = cond_enc.encode_image_coarse(prompt);
        it.prompt_latent = encode_image(prompt);
        items.push_back(it);
    }

    ParameterStore<double> store;
    RngStream root(5050);
    create_unet_params(u, e.d_txt, store, root.split(fnv1a("init/unet")));
    cond_enc.create_mapper_params(store, root.split(fnv1a("init/mapper")));

    auto sorted_names = [&](const ParameterStore<double>& st, StageTag tag) {
        auto n = st.names_with_tag(tag);
        std::sort(n.begin(), n.end());
        return n;
    };
    // backbone tensors outside the text cross-attention K/V = frozen + the
    // refiner-tagged final conv
    auto untouched_by_stage1 = [&](const ParameterStore<double>& st) {
        auto n = sorted_names(st, StageTag::frozen);
        auto r = sorted_names(st, StageTag::refiner);
        n.insert(n.end(), r.begin(), r.end());
        return st.subset_hash(n);
    };

    const std::uint64_t h_outside_init = untouched_by_stage1(store);
    const std::uint64_t h_stage1_init = store.subset_hash(sorted_names(store, StageTag::stage1));

    TrainContext<double> ctx;
    ctx.unet = u;
    ctx.sched = sched;
    ctx.conditioning = &cond_enc;
    run_training(ctx, store, items, {"stage1", {StageTag::stage1}, 3, 2, 1e-3, 171});

    const bool s1_gated = untouched_by_stage1(store) == h_outside_init;
    const bool s1_moved = store.subset_hash(sorted_names(store, StageTag::stage1)) != h_stage1_init;

    create_injection_params(u, store);
    const std::uint64_t h_s1_after = store.subset_hash(sorted_names(store, StageTag::stage1));
    const std::uint64_t h_outside_after = untouched_by_stage1(store);
    const std::uint64_t h_s2_before = store.subset_hash(sorted_names(store, StageTag::stage2));

    TrainContext<double> ctx2 = ctx;
    ctx2.flags.injection.enabled = true;
    run_training(ctx2, store, items, {"stage2", {StageTag::stage2}, 3, 2, 1e-3, 272});

    const bool s2_gated = untouched_by_stage1(store) == h_outside_after &&
                          store.subset_hash(sorted_names(store, StageTag::stage1)) == h_s1_after;
    const bool s2_moved = store.subset_hash(sorted_names(store, StageTag::stage2)) != h_s2_before;

    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    report(5, s1_gated && s1_moved && s2_gated && s2_moved,
           fmt("stage gating by subset hash: stage1 leaves non-K/V backbone %s and moves its own set %s; stage2 leaves stage1+frozen %s and moves injection %s (%.1fs)",
               s1_gated ? "intact" : "CHANGED", s1_moved ? "(yes)" : "(NO)",
               s2_gated ? "intact" : "CHANGED", s2_moved ? "(yes)" : "(NO)", secs));
}

// ---------------------------------------------------------------------------
// criterion 6: end-to-end ablation ordering
// ---------------------------------------------------------------------------
// Synthetic dataset of 512 clips (8 frames, 32x32 latents, 9 subject
// classes), 32 held-out prompts. For each of three seeds, the full model
// (coarse conditioning + trained injection) must beat the coarse-only model,
// which must beat the text-only baseline, on both the clip-image-analogue
// and dino-analogue scores. Passing requires at least 2 of 3 seeds.

namespace e2e {

constexpr int kStage1Steps = 100;
constexpr int kStage2Steps = 60;
constexpr int kBatch = 2;
constexpr double kLrStage1 = 3e-3;
constexpr double kLrStage2 = 3e-4;
constexpr int kSampleSteps = 5;
constexpr std::uint64_t kDataSeed = 77;

struct Scores {
    double clip_image = 0.0;
    double dino = 0.0;
};

} // namespace e2e

static void criterion6() {
    const auto t0 = Clock::now();
    UNetConfig u;
    u.base_channels = 8;
    u.channel_multipliers = {1, 2, 4};
    u.frames = 8;
    u.latent_h = u.latent_w = 32;
    u.latent_channels = 4;
    u.attention_levels = {1, 2};
    u.head_dim = 4;
    const NoiseSchedule sched = build_schedule(40, 0.01, 0.24);

    DatasetConfig d;
    d.frames = 8;
    d.height = d.width = 32;
    d.prompt_size = 32;
    auto records = synth_generate(512, e2e::kDataSeed, d);
    filter_records(records, d);
    split_manifest(records, 32, e2e::kDataSeed);

    const Vocabulary vocab = dataset_vocabulary(d);
    EncoderConfig e;
    e.vocab_size = vocab.size();
    e.d_txt = 8;
    e.image_patch = 4;
    e.d_img = 12;
    e.max_tokens = 12;
    const Conditioning<double> cond_enc(e);

    std::vector<TrainItem<double>> items, items_text;
    std::vector<const ClipRecord*> test;
    for (const auto& r : records) {
        if (r.verdict != Verdict::kept) continue;
        if (r.split == "test") {
            test.push_back(&r);
            continue;
        }
        TrainItem<double> it;
        it.latents = encode_frames(r.video);
        it.tokens = vocab.encode(r.caption, e.max_tokens);
        auto prompt = extract_prompt_image(r, 32);
        it.k = r.k;
        it.n = r.n;
        it.coarse_feature = cond_enc.encode_image_coarse(prompt);
        it.prompt_latent = encode_image(prompt);
        items.push_back(it);
        TrainItem<double> tx;
        tx.latents = it.latents;
        tx.tokens = it.tokens;
        items_text.push_back(tx);
    }

    MetricConfig mc;
    mc.vocab_size = vocab.size();
    mc.d_embed = 16;
    mc.patch = 4;
    const auto mp = build_metric_pair(mc);

    TrainContext<double> ctx;
    ctx.unet = u;
    ctx.sched = sched;
    ctx.conditioning = &cond_enc;

    int passing = 0;
    for (const std::uint64_t seed : {1ull, 2ull, 3ull}) {
        auto make_store = [&](std::uint64_t ps) {
            ParameterStore<double> st;
            RngStream root(ps);
            create_unet_params(u, e.d_txt, st, root.split(fnv1a("init/unet")));
            cond_enc.create_mapper_params(st, root.split(fnv1a("init/mapper")));
            return st;
        };
        // full and coarse share one stage-1 run; full adds stage-2 injection
        // training; the text-only baseline trains its own stage 1 on
        // caption-only items
        auto st = make_store(seed * 100 + 1);
        run_training(ctx, st, items,
                     {"stage1", {StageTag::stage1}, e2e::kStage1Steps, e2e::kBatch, e2e::kLrStage1,
                      seed * 10 + 1});
        auto st_full = st;
        create_injection_params(u, st_full);
        TrainContext<double> ctx2 = ctx;
        ctx2.flags.injection.enabled = true;
        run_training(ctx2, st_full, items,
                     {"stage2", {StageTag::stage2}, e2e::kStage2Steps, e2e::kBatch, e2e::kLrStage2,
                      seed * 10 + 2});
        auto st_text = make_store(seed * 100 + 2);
        run_training(ctx, st_text, items_text,
                     {"stage1", {StageTag::stage1}, e2e::kStage1Steps, e2e::kBatch, e2e::kLrStage1,
                      seed * 10 + 3});

        auto eval_model = [&](const ParameterStore<double>& store, bool injection, bool text_only) {
            EngineFlags fl;
            fl.injection.enabled = injection;
            e2e::Scores sc;
            for (std::size_t i = 0; i < test.size(); ++i) {
                const auto& rec = *test[i];
                auto prompt = extract_prompt_image(rec, 32);
                GenerationInputs<double> in;
                if (text_only) {
                    in = text_only_inputs(cond_enc, vocab, rec.caption);
                } else {
                    in = build_generation_inputs(cond_enc, store, vocab, u, rec.caption, rec.k,
                                                 rec.n, prompt);
                }
                // paired noise: same per-clip generation seed for all models
                const std::uint64_t gs = seed * 0x9e3779b97f4a7c15ull + i * 2 + 1;
                auto lat = generate_video(u, store, sched, in, fl, gs, e2e::kSampleSteps);
                auto px = decode_frames(lat);
                sc.clip_image += clip_image_score(mp, px, prompt);
                sc.dino += dino_like_score(mp, px, prompt);
            }
            sc.clip_image /= static_cast<double>(test.size());
            sc.dino /= static_cast<double>(test.size());
            return sc;
        };
        const auto full = eval_model(st_full, true, false);
        const auto coarse = eval_model(st, false, false);
        const auto text = eval_model(st_text, false, true);
        const bool ordered = full.clip_image > coarse.clip_image && coarse.clip_image > text.clip_image &&
                             full.dino > coarse.dino && coarse.dino > text.dino;
        passing += ordered ? 1 : 0;
        std::printf("    seed %llu: clip-image %.3f / %.3f / %.3f  dino %.3f / %.3f / %.3f  (full/coarse/text) %s\n",
                    static_cast<unsigned long long>(seed), full.clip_image, coarse.clip_image,
                    text.clip_image, full.dino, coarse.dino, text.dino,
                    ordered ? "ordered" : "NOT ordered");
        std::fflush(stdout);
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    report(6, passing >= 2,
           fmt("end-to-end ordering full > coarse > text on both scores in %d of 3 seeds (32 held-out clips, %.0fs)",
               passing, secs));
}

// ---------------------------------------------------------------------------
// criterion 7: dataset protocol
// ---------------------------------------------------------------------------

static void criterion7() {
    const auto t0 = Clock::now();

    // exact keyword list
    const std::vector<std::string> want_classes = {"dog",   "cat",   "bear",     "car",  "panda",
                                                   "tiger", "horse", "elephant", "lion"};
    const bool classes_ok = subject_keyword_classes() == want_classes;

    // crafted 20-record manifest with hand-assigned ratios and captions;
    // filter_records reads only area_ratio and the caption
    DatasetConfig d;
    d.extra_classes = {"zebra"};
    struct Case {
        double ratio;
        const char* caption;
        Verdict want;
    };
    const std::vector<Case> cases = {
        {0.010, "a dog runs across the field", Verdict::too_small},
        {0.049, "a cat walks near the river", Verdict::too_small},
        {0.0499999, "a bear jumps over rocks", Verdict::too_small},
        {0.050, "a dog runs across the field", Verdict::kept},      // lower bound inclusive
        {0.850, "a cat walks near the river", Verdict::kept},       // upper bound inclusive
        {0.851, "a dog runs across the field", Verdict::too_large},
        {0.900, "a lion rests under palm leaves", Verdict::too_large},
        {1.000, "a tiger moves through snow", Verdict::too_large},
        {0.500, "a red dog runs across the field", Verdict::kept},
        {0.500, "the fluffy golden cat walks near the river", Verdict::kept},
        {0.500, "a panda plays in the garden", Verdict::kept},
        {0.500, "elephant moves through snow", Verdict::kept},      // no determiner
        {0.500, "a giant horse jumps over rocks", Verdict::kept},
        {0.500, "a car moves through snow", Verdict::kept},
        {0.500, "a zebra runs across the field", Verdict::class_rejected}, // parsed, not accepted
        {0.500, "a unicorn runs across the field", Verdict::class_rejected}, // no subject chunk
        {0.500, "hello world", Verdict::class_rejected},
        {0.500, "", Verdict::class_rejected},
        {0.200, "a bear rests under palm leaves", Verdict::kept},
        {0.049999999999, "a lion plays in the garden", Verdict::too_small},
    };
    std::vector<ClipRecord> recs(cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
        recs[i].clip_id = fmt("crafted_%02zu", i);
        recs[i].area_ratio = cases[i].ratio;
        recs[i].caption = cases[i].caption;
    }
    filter_records(recs, d);
    bool verdicts_ok = true;
    std::map<Verdict, int> got_counts, want_counts;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        verdicts_ok = verdicts_ok && recs[i].verdict == cases[i].want;
        ++got_counts[recs[i].verdict];
        ++want_counts[cases[i].want];
    }
    verdicts_ok = verdicts_ok && got_counts == want_counts;

    // split with test_count = 650 over 700 kept records
    std::vector<ClipRecord> many(704);
    for (std::size_t i = 0; i < many.size(); ++i) {
        many[i].clip_id = fmt("bulk_%03zu", i);
        many[i].area_ratio = i < 700 ? 0.4 : 0.01; // last four fail the ratio floor
        many[i].caption = "a dog runs across the field";
    }
    filter_records(many, DatasetConfig{});
    split_manifest(many, 650, 31);
    int n_test = 0, n_train = 0, n_none = 0;
    bool split_ok = true;
    for (const auto& r : many) {
        if (r.split == "test") ++n_test;
        else if (r.split == "train") ++n_train;
        else if (r.split == "none") ++n_none;
        else split_ok = false;
        split_ok = split_ok && ((r.verdict == Verdict::kept) == (r.split != "none"));
    }
    split_ok = split_ok && n_test == 650 && n_train == 50 && n_none == 4;

    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    report(7, classes_ok && verdicts_ok && split_ok,
           fmt("dataset protocol: keyword list %s, 20-record verdict multiset %s, 650/50/4 split %s (%.1fs)",
               classes_ok ? "exact" : "WRONG", verdicts_ok ? "exact" : "WRONG",
               split_ok ? "exact and disjoint" : "WRONG", secs));
}

// ---------------------------------------------------------------------------
// criterion 8: sampling determinism
// ---------------------------------------------------------------------------

static void criterion8() {
    const auto t0 = Clock::now();
    const std::string root = "acceptance_scratch";
    fs::remove_all(root);
    fs::create_directories(root);

    const RunConfig cfg = parse_run_config(
        "base_channels = 4\nchannel_multipliers = 1,2\nframes = 2\nlatent_size = 8\n"
        "attention_levels = 0,1\nhead_dim = 4\nt_steps = 8\nbeta_start = 0.05\nbeta_end = 0.3\n"
        "d_txt = 6\nimage_patch = 2\nd_img = 8\nmax_tokens = 12\nclips = 8\ntest_count = 2\n"
        "data_seed = 11\nstage1_steps = 2\nbatch_size = 2\nlr = 1e-3\nsample_steps = 4\n"
        "metric_d_embed = 8\nmetric_patch = 2\n");
    std::ostringstream log;
    cmd_datagen(cfg, root + "/data", log);
    TrainArgs ta;
    ta.stage = "stage1";
    ta.data_dir = root + "/data";
    ta.out_ckpt = root + "/s1.ckpt";
    cmd_train(cfg, ta, log);

    std::string prompt_path;
    std::string caption;
    for (const auto& c : load_clips_dir(root + "/data", "train")) {
        prompt_path = root + "/data/prompts/" + c.clip_id + ".pvtb";
        caption = c.caption;
        break;
    }

    auto run = [&](const std::string& prefix) {
        SampleArgs sa;
        sa.ckpt = root + "/s1.ckpt";
        sa.prompt_path = prompt_path;
        sa.caption = caption;
        sa.out_prefix = root + "/" + prefix;
        sa.seed = 424242;
        return cmd_sample(cfg, sa, log);
    };
    const auto first = run("one");
    const auto second = run("two");

    auto slurp = [](const std::string& p) {
        std::ifstream is(p, std::ios::binary);
        std::ostringstream os;
        os << is.rdbuf();
        return os.str();
    };
    const bool hashes_ok =
        first.latent_hash == second.latent_hash && first.pixel_hash == second.pixel_hash;
    const bool bytes_ok =
        slurp(root + "/one.latent.pvtb") == slurp(root + "/two.latent.pvtb") &&
        slurp(root + "/one.ppm") == slurp(root + "/two.ppm");

    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    report(8, hashes_ok && bytes_ok,
           fmt("sampling determinism: repeated cmd_sample gives identical hashes %s and identical artifact bytes %s (latent %s, %.1fs)",
               hashes_ok ? "(yes)" : "(NO)", bytes_ok ? "(yes)" : "(NO)",
               hash_hex(first.latent_hash).c_str(), secs));
}

int main(int argc, char** argv) {
    void (*checks[8])() = {criterion1, criterion2, criterion3, criterion4,
                           criterion5, criterion6, criterion7, criterion8};
    std::vector<int> run;
    for (int i = 1; i < argc; ++i) {
        const int n = std::atoi(argv[i]);
        if (n < 1 || n > 8) {
            std::fprintf(stderr, "usage: %s [criterion numbers 1-8]\n", argv[0]);
            return 2;
        }
        run.push_back(n);
    }
    if (run.empty()) run = {1, 2, 3, 4, 5, 6, 7, 8};
    for (int n : run) checks[n - 1]();
    std::printf("%zu of %zu criteria passed\n", run.size() - static_cast<std::size_t>(g_failures),
                run.size());
    return g_failures == 0 ? 0 : 1;
}
