#pragma once

// Two-stage training harness with strict parameter gating, Adam, and
// checkpoint serialization. Stage 1 trains the image-to-text mapper and the
// text cross-attention K/V projections; stage 2 trains only the injection
// K/V projections on top of a stage-1 checkpoint, leaving everything else
// bitwise-untouched. A unified plan training both sets at once exists solely
// as an ablation and must be requested explicitly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "promptvid/engine.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/param_store.hpp"
#include "promptvid/rng.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

// ---------------------------------------------------------------------------
// plans and parameter selection
// ---------------------------------------------------------------------------

struct StagePlan {
    std::string stage;                    // stage1 | stage2 | unified | refine
    std::vector<StageTag> trainable_tags;
    int steps = 0;
    int batch_size = 4;
    double lr = 1e-4;
    std::uint64_t seed = 0;

    void validate() const {
        if (stage != "stage1" && stage != "stage2" && stage != "unified" && stage != "refine") {
            fail(ErrorKind::plan, "unknown training stage '" + stage + "'");
        }
        if (steps < 0) fail(ErrorKind::plan, "steps must be >= 0");
        if (batch_size < 1) fail(ErrorKind::plan, "batch size must be >= 1");
        if (!(lr >= 0.0)) fail(ErrorKind::plan, "learning rate must be >= 0");
    }
};

inline StagePlan stage1_plan() { return {"stage1", {StageTag::stage1}, 2000, 4, 1e-4, 0}; }
inline StagePlan stage2_plan() { return {"stage2", {StageTag::stage2}, 1000, 4, 1e-4, 0}; }
// Ablation: both coarse and injection parameter sets trained in one stage.
inline StagePlan unified_plan() { return {"unified", {StageTag::stage1, StageTag::stage2}, 2000, 4, 1e-4, 0}; }
// Output-refiner fine-tuning: the refiner blocks plus the backbone's final
// conv, which share the refiner tag.
inline StagePlan refine_plan() { return {"refine", {StageTag::refiner}, 500, 4, 1e-4, 0}; }

// Exactly the names carrying one of the plan's tags, sorted. Every requested
// tag must match at least one parameter; an empty tag list selects nothing
// and turns training steps into no-ops.
template <class T>
std::vector<std::string> select_trainable(const ParameterStore<T>& store, const StagePlan& plan) {
    std::vector<std::string> out;
    for (StageTag tag : plan.trainable_tags) {
        const int code = static_cast<int>(tag);
        if (code < 0 || code > 3) {
            fail(ErrorKind::plan, "unknown stage tag code " + std::to_string(code));
        }
        auto names = store.names_with_tag(tag);
        if (names.empty()) {
            fail(ErrorKind::plan, std::string("no parameters carry tag '") + to_string(tag) + "'");
        }
        out.insert(out.end(), names.begin(), names.end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update for a single tensor. step is the 1-based
// update count; m and v are the running moments, replaced in place.
template <class T>
Tensor<T> adam_update(const Tensor<T>& param, const std::vector<T>& grad, Tensor<T>& m, Tensor<T>& v,
                      std::int64_t step, double lr, const AdamConfig& ac = {}) {
    if (static_cast<std::size_t>(param.numel()) != grad.size()) {
        fail(ErrorKind::dimension, "adam_update: gradient length " + std::to_string(grad.size()) +
                                       " does not match parameter " + to_string(param.shape()));
    }
    if (m.shape() != param.shape() || v.shape() != param.shape()) {
        fail(ErrorKind::dimension, "adam_update: moment shapes do not match parameter " +
                                       to_string(param.shape()));
    }
    if (step < 1) fail(ErrorKind::contract, "adam_update: step must be >= 1");
    const double bc1 = 1.0 - std::pow(ac.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(ac.beta2, static_cast<double>(step));
    std::vector<T> nm(grad.size()), nv(grad.size()), np(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        const double mi = ac.beta1 * static_cast<double>(m.value_at(static_cast<std::int64_t>(i))) +
                          (1.0 - ac.beta1) * g;
        const double vi = ac.beta2 * static_cast<double>(v.value_at(static_cast<std::int64_t>(i))) +
                          (1.0 - ac.beta2) * g * g;
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        nm[i] = static_cast<T>(mi);
        nv[i] = static_cast<T>(vi);
        np[i] = static_cast<T>(static_cast<double>(param.value_at(static_cast<std::int64_t>(i))) -
                               lr * mhat / (std::sqrt(vhat) + ac.eps));
    }
    m = Tensor<T>::from(param.shape(), std::move(nm));
    v = Tensor<T>::from(param.shape(), std::move(nv));
    return Tensor<T>::from(param.shape(), std::move(np));
}

template <class T>
struct AdamState {
    std::int64_t step = 0; // completed updates
    std::map<std::string, Tensor<T>> m, v;
};

// ---------------------------------------------------------------------------
// training step
// ---------------------------------------------------------------------------

template <class T>
struct TrainItem {
    Tensor<T> latents; // [latent_channels, F, H, W] clean clip latents
    TextTokenSeq tokens;
    // Subject span in the tokens; n = 0 marks a text-only item (no image
    // conditioning at all, used by the text-only baseline).
    int k = 0, n = 0;
    Tensor<T> coarse_feature; // frozen image-encoder output, needed when n > 0
    Tensor<T> prompt_latent;  // [latent_channels, H, W], needed when injection trains
};

template <class T>
struct TrainContext {
    UNetConfig unet;
    NoiseSchedule sched;
    const Conditioning<T>* conditioning = nullptr;
    EngineFlags flags;                      // injection on for stage-2 training
    const RefinerConfig* refiner = nullptr; // set when the refiner participates
};

// One optimization step over a batch: per item, draw a uniform timestep and a
// noise sample, noise the latents, run the full engine prediction with the
// item's condition (and a freshly noised prompt latent when injection is on),
// average the epsilon losses, and apply one Adam update to the trainable
// subset. Deterministic given the incoming rng state.
template <class T>
double train_step(const TrainContext<T>& ctx, ParameterStore<T>& store,
                  const std::vector<TrainItem<T>>& batch, const std::vector<std::string>& trainable,
                  AdamState<T>& adam, double lr, RngStream& rng) {
    if (batch.empty()) fail(ErrorKind::contract, "train_step: empty batch");
    if (!ctx.conditioning) fail(ErrorKind::state, "train_step: conditioning not set");
    for (const auto& name : trainable) store.get(name).set_requires_grad(true);

    Tensor<T> loss;
    for (const auto& item : batch) {
        const int t = 1 + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(ctx.sched.t_steps)));
        auto eps = Tensor<T>::randn(item.latents.shape(), rng);
        auto x_t = forward_noise(ctx.sched, item.latents, t, eps);

        ComposedCondition<T> cond;
        if (item.n > 0) {
            auto f_t = ctx.conditioning->encode_text(item.tokens);
            auto f_i = ctx.conditioning->map_to_text_space(store, item.coarse_feature);
            cond = ctx.conditioning->fuse(f_t, item.tokens, f_i, item.k, item.n);
        } else {
            cond = ctx.conditioning->text_only(item.tokens);
        }

        FeaturePyramid<T> pyramid;
        const FeaturePyramid<T>* pp = nullptr;
        if (ctx.flags.injection.enabled) {
            if (!item.prompt_latent.defined()) {
                fail(ErrorKind::state, "train_step: injection enabled but item has no prompt latent");
            }
            auto prompt_eps = Tensor<T>::randn(item.prompt_latent.shape(), rng);
            auto noisy_prompt = forward_noise(ctx.sched, item.prompt_latent, t, prompt_eps);
            pyramid = extract_prompt_pyramid(ctx.unet, store, noisy_prompt, t);
            pp = &pyramid;
        }

        auto eps_hat = predict_epsilon(ctx.unet, store, ctx.sched, x_t, t, cond, pp, ctx.flags, ctx.refiner);
        auto item_loss = epsilon_loss(eps_hat, eps);
        loss = loss.defined() ? add(loss, item_loss) : item_loss;
    }
    loss = mul_scalar(loss, 1.0 / static_cast<double>(batch.size()));
    const double loss_value = static_cast<double>(loss.scalar());
    if (!std::isfinite(loss_value)) {
        fail(ErrorKind::numeric, "train_step: non-finite loss " + std::to_string(loss_value));
    }

    if (!trainable.empty()) {
        backward(loss);
        const std::int64_t step = ++adam.step;
        for (const auto& name : trainable) {
            auto p = store.get(name);
            // parameters outside this batch's graph (e.g. the mapper on an
            // all-text batch) simply see a zero gradient
            std::vector<T> grad = p.has_grad() ? p.grad()
                                               : std::vector<T>(static_cast<std::size_t>(p.numel()), T(0));
            auto& m = adam.m[name];
            auto& v = adam.v[name];
            if (!m.defined()) m = Tensor<T>::zeros(p.shape());
            if (!v.defined()) v = Tensor<T>::zeros(p.shape());
            store.set_value(name, adam_update(p, grad, m, v, step, lr));
        }
    }
    return loss_value;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct TrainResult {
    double first_loss = 0.0;
    double last_loss = 0.0;
    int steps_run = 0;
};

// Runs plan.steps optimization steps over seeded reshuffles of the data.
// Identical (data, plan, seed, initial store) always produces an identical
// final parameter store.
template <class T>
TrainResult run_training(const TrainContext<T>& ctx, ParameterStore<T>& store,
                         const std::vector<TrainItem<T>>& data, const StagePlan& plan) {
    plan.validate();
    if (data.empty()) fail(ErrorKind::data, "run_training: no training items");
    auto trainable = select_trainable(store, plan);
    AdamState<T> adam;
    RngStream root(plan.seed);
    RngStream order_rng = root.split(fnv1a("train/order"));
    RngStream noise_rng = root.split(fnv1a("train/noise"));

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::size_t cursor = order.size(); // forces a shuffle before the first batch

    TrainResult result;
    for (int step = 0; step < plan.steps; ++step) {
        std::vector<TrainItem<T>> batch;
        batch.reserve(static_cast<std::size_t>(plan.batch_size));
        for (int b = 0; b < plan.batch_size; ++b) {
            if (cursor >= order.size()) {
                for (std::size_t i = order.size(); i > 1; --i) {
                    const std::size_t j = static_cast<std::size_t>(order_rng.uniform_index(i));
                    std::swap(order[i - 1], order[j]);
                }
                cursor = 0;
            }
            batch.push_back(data[order[cursor++]]);
        }
        double loss;
        try {
            loss = train_step(ctx, store, batch, trainable, adam, plan.lr, noise_rng);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::numeric) {
                fail(ErrorKind::numeric, plan.stage + " step " + std::to_string(step + 1) +
                                             " aborted: " + e.what());
            }
            throw;
        }
        if (step == 0) result.first_loss = loss;
        result.last_loss = loss;
        ++result.steps_run;
    }
    return result;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    int version = 1;
    std::uint64_t config_hash = 0; // UNetConfig::config_hash()
    std::string config_string;     // canonical config for inspection
    int t_steps = 0;
    double beta_start = 0.0;
    double beta_end = 0.0;
    std::vector<std::string> stages_completed;
    // Content hash of the parameter store this training run started from;
    // zero for a run that started fresh. Lets a stage-2 checkpoint name its
    // stage-1 ancestor.
    std::uint64_t ancestor_hash = 0;
    std::uint64_t seed = 0;
};

inline constexpr char checkpoint_magic[4] = {'P', 'V', 'C', 'K'};

template <class T>
void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParameterStore<T>& store) {
    nlohmann::json j;
    j["version"] = meta.version;
    j["config_hash"] = hash_hex(meta.config_hash);
    j["config"] = meta.config_string;
    j["t_steps"] = meta.t_steps;
    j["beta_start"] = meta.beta_start;
    j["beta_end"] = meta.beta_end;
    j["stages_completed"] = meta.stages_completed;
    j["ancestor_hash"] = hash_hex(meta.ancestor_hash);
    j["seed"] = meta.seed;
    const std::string header = j.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) fail(ErrorKind::data, "cannot open '" + tmp + "' for writing");
        detail::write_raw(os, checkpoint_magic, 4);
        const std::uint16_t version = 1;
        detail::write_raw(os, &version, 2);
        const std::uint32_t len = static_cast<std::uint32_t>(header.size());
        detail::write_raw(os, &len, 4);
        detail::write_raw(os, header.data(), header.size());
        store.save(os);
        if (!os) fail(ErrorKind::data, "write to '" + tmp + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

inline std::uint64_t parse_hash_hex(const std::string& s) {
    return std::stoull(s, nullptr, 16);
}

template <class T>
std::pair<CheckpointMeta, ParameterStore<T>> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::data, "cannot open checkpoint '" + path + "'");
    char magic[4];
    detail::read_raw(is, magic, 4);
    if (std::memcmp(magic, checkpoint_magic, 4) != 0) {
        fail(ErrorKind::version, "'" + path + "' is not a checkpoint file");
    }
    std::uint16_t version;
    detail::read_raw(is, &version, 2);
    if (version != 1) fail(ErrorKind::version, "unsupported checkpoint version " + std::to_string(version));
    std::uint32_t len;
    detail::read_raw(is, &len, 4);
    if (len > (1u << 20)) fail(ErrorKind::data, "implausible checkpoint header length");
    std::string header(len, '\0');
    detail::read_raw(is, header.data(), len);

    CheckpointMeta meta;
    try {
        const auto j = nlohmann::json::parse(header);
        meta.version = j.at("version").get<int>();
        meta.config_hash = parse_hash_hex(j.at("config_hash").get<std::string>());
        meta.config_string = j.at("config").get<std::string>();
        meta.t_steps = j.at("t_steps").get<int>();
        meta.beta_start = j.at("beta_start").get<double>();
        meta.beta_end = j.at("beta_end").get<double>();
        meta.stages_completed = j.at("stages_completed").get<std::vector<std::string>>();
        meta.ancestor_hash = parse_hash_hex(j.at("ancestor_hash").get<std::string>());
        meta.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::parse, "bad checkpoint header: " + std::string(e.what()));
    }
    auto store = ParameterStore<T>::load(is);
    return {meta, std::move(store)};
}

// Loading a checkpoint into a run requires the exact backbone config and
// noise schedule it was trained with.
inline void verify_checkpoint(const CheckpointMeta& meta, const UNetConfig& cfg,
                              const NoiseSchedule& sched, double beta_start, double beta_end) {
    if (meta.config_hash != cfg.config_hash()) {
        fail(ErrorKind::version, "checkpoint backbone config " + meta.config_string +
                                     " does not match the requested config " + cfg.canonical_string());
    }
    if (meta.t_steps != sched.t_steps || meta.beta_start != beta_start || meta.beta_end != beta_end) {
        fail(ErrorKind::version, "checkpoint noise schedule does not match the requested schedule");
    }
}

} // namespace promptvid
