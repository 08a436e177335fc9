#pragma once

// Command-line layer: a strict key=value run configuration and five commands
// (datagen, train, sample, eval, inspect) wired over the library, plus an
// in-process entry point for tests.
//
// Exit codes:
//   0  success
//   2  bad run configuration or command line
//   3  missing or malformed inputs (data, parse, vocabulary, span, split,
//      extraction, version)
//   4  engine errors (numeric, contract, dimension, schedule, state, plan,
//      metric)
//
// Every command logs its seed, config hash, and a short artifact version,
// writes outputs atomically, and drops the fully resolved config next to
// them so the run is replayable from its artifacts alone.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "promptvid/dataset.hpp"
#include "promptvid/engine.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/metrics.hpp"
#include "promptvid/trainer.hpp"
#include "promptvid/watermark.hpp"

namespace promptvid {

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
    // backbone
    int base_channels = 16;
    std::vector<int> channel_multipliers{1, 2, 4};
    int frames = 8;
    int latent_size = 32; // square latent extent; prompt crops ride the same path
    std::vector<int> attention_levels{0, 1, 2};
    int head_dim = 8;
    // noise schedule
    int t_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    // conditioning encoders
    int d_txt = 16;
    int image_patch = 8;
    int d_img = 12;
    std::vector<int> mapper_hidden; // empty = two hidden layers of 4*d_txt
    std::uint64_t frozen_seed = 1234;
    int max_tokens = 32;
    // dataset
    int clips = 64;
    double min_ratio = 0.05;
    double max_ratio = 0.85;
    std::vector<std::string> extra_classes;
    int test_count = 8;
    std::uint64_t data_seed = 7;
    // training
    int stage1_steps = 200;
    int stage2_steps = 100;
    int unified_steps = 200;
    int refine_steps = 50;
    int batch_size = 4;
    double lr = 1e-4;
    std::uint64_t train_seed = 0;
    std::uint64_t param_seed = 11;
    bool text_only = false;
    // feature flags
    bool injection = true;
    bool value_recursion = false;
    bool unified_training = false;
    bool use_refiner = false;
    bool fresh_prompt_noise = false;
    // sampling
    int sample_steps = 10;
    std::uint64_t sample_seed = 0;
    // metrics
    int metric_d_embed = 16;
    int metric_patch = 4;
    std::uint64_t clip_seed = 501;
    std::uint64_t dino_seed = 777;
    std::uint64_t eval_seed = 99;

    UNetConfig unet() const {
        UNetConfig u;
        u.base_channels = base_channels;
        u.channel_multipliers = channel_multipliers;
        u.frames = frames;
        u.latent_h = latent_size;
        u.latent_w = latent_size;
        u.latent_channels = codec_latent_channels;
        u.attention_levels = attention_levels;
        u.head_dim = head_dim;
        return u;
    }

    NoiseSchedule schedule() const { return build_schedule(t_steps, beta_start, beta_end); }

    DatasetConfig dataset() const {
        DatasetConfig d;
        d.frames = frames;
        d.height = latent_size;
        d.width = latent_size;
        d.prompt_size = latent_size;
        d.min_ratio = min_ratio;
        d.max_ratio = max_ratio;
        d.extra_classes = extra_classes;
        return d;
    }

    EncoderConfig encoder(int vocab_size) const {
        EncoderConfig e;
        e.vocab_size = vocab_size;
        e.d_txt = d_txt;
        e.image_patch = image_patch;
        e.d_img = d_img;
        e.mapper_hidden_widths = mapper_hidden;
        e.frozen_seed = frozen_seed;
        e.max_tokens = max_tokens;
        return e;
    }

    MetricConfig metric(int vocab_size) const {
        MetricConfig m;
        m.vocab_size = vocab_size;
        m.d_embed = metric_d_embed;
        m.patch = metric_patch;
        m.clip_seed = clip_seed;
        m.dino_seed = dino_seed;
        return m;
    }

    RefinerConfig refiner() const { return default_refiner_config(unet()); }

    void validate() const {
        unet().validate();
        if (t_steps < 1) fail(ErrorKind::config, "t_steps must be >= 1");
        if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
            fail(ErrorKind::config, "beta bounds must satisfy 0 < beta_start <= beta_end < 1");
        }
        encoder(1).validate();
        dataset().validate();
        if (clips < 0) fail(ErrorKind::config, "clips must be >= 0");
        if (test_count < 0) fail(ErrorKind::config, "test_count must be >= 0");
        if (stage1_steps < 0 || stage2_steps < 0 || unified_steps < 0 || refine_steps < 0) {
            fail(ErrorKind::config, "stage step counts must be >= 0");
        }
        if (batch_size < 1) fail(ErrorKind::config, "batch_size must be >= 1");
        if (!(lr >= 0.0)) fail(ErrorKind::config, "lr must be >= 0");
        if (sample_steps < 1) fail(ErrorKind::config, "sample_steps must be >= 1");
        if (metric_d_embed < 1) fail(ErrorKind::config, "metric_d_embed must be >= 1");
        if (metric_patch < 1) fail(ErrorKind::config, "metric_patch must be >= 1");
        if (clip_seed == dino_seed) fail(ErrorKind::config, "clip_seed and dino_seed must differ");
    }
};

namespace clidetail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline long long parse_ll(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        fail(ErrorKind::config, "key '" + key + "': expected an integer, got '" + v + "'");
    }
}

inline int parse_int(const std::string& key, const std::string& v) {
    long long x = parse_ll(key, v);
    if (x < INT32_MIN || x > INT32_MAX) fail(ErrorKind::config, "key '" + key + "': value out of range");
    return static_cast<int>(x);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
        std::uint64_t x = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        fail(ErrorKind::config, "key '" + key + "': expected an unsigned integer, got '" + v + "'");
    }
}

inline double parse_f64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("trailing characters");
        return x;
    } catch (const std::exception&) {
        fail(ErrorKind::config, "key '" + key + "': expected a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    fail(ErrorKind::config, "key '" + key + "': expected true/false/on/off/1/0, got '" + v + "'");
}

inline std::vector<std::string> split_csv(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(v);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    for (const auto& item : split_csv(v)) out.push_back(parse_int(key, item));
    return out;
}

inline std::string fmt_f64(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline std::string fmt_bool(bool b) { return b ? "true" : "false"; }

inline std::string fmt_int_list(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

inline std::string fmt_str_list(const std::vector<std::string>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
    return s;
}

struct ConfigKey {
    const char* key;
    const char* doc;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
    auto ik = [](const char* k, const char* doc, int RunConfig::*f) {
        return ConfigKey{k, doc,
                         [k, f](RunConfig& c, const std::string& v) { c.*f = parse_int(k, v); },
                         [f](const RunConfig& c) { return std::to_string(c.*f); }};
    };
    auto fk = [](const char* k, const char* doc, double RunConfig::*f) {
        return ConfigKey{k, doc,
                         [k, f](RunConfig& c, const std::string& v) { c.*f = parse_f64(k, v); },
                         [f](const RunConfig& c) { return fmt_f64(c.*f); }};
    };
    auto uk = [](const char* k, const char* doc, std::uint64_t RunConfig::*f) {
        return ConfigKey{k, doc,
                         [k, f](RunConfig& c, const std::string& v) { c.*f = parse_u64(k, v); },
                         [f](const RunConfig& c) { return std::to_string(c.*f); }};
    };
    auto bk = [](const char* k, const char* doc, bool RunConfig::*f) {
        return ConfigKey{k, doc,
                         [k, f](RunConfig& c, const std::string& v) { c.*f = parse_bool(k, v); },
                         [f](const RunConfig& c) { return fmt_bool(c.*f); }};
    };
    auto lk = [](const char* k, const char* doc, std::vector<int> RunConfig::*f) {
        return ConfigKey{k, doc,
                         [k, f](RunConfig& c, const std::string& v) { c.*f = parse_int_list(k, v); },
                         [f](const RunConfig& c) { return fmt_int_list(c.*f); }};
    };
    auto sk = [](const char* k, const char* doc, std::vector<std::string> RunConfig::*f) {
        return ConfigKey{k, doc, [f](RunConfig& c, const std::string& v) { c.*f = split_csv(v); },
                         [f](const RunConfig& c) { return fmt_str_list(c.*f); }};
    };
    static const std::vector<ConfigKey> keys = {
        ik("base_channels", "backbone width at the top level", &RunConfig::base_channels),
        lk("channel_multipliers", "per-level width multipliers", &RunConfig::channel_multipliers),
        ik("frames", "frames per clip", &RunConfig::frames),
        ik("latent_size", "square latent height and width", &RunConfig::latent_size),
        lk("attention_levels", "levels carrying attention blocks", &RunConfig::attention_levels),
        ik("head_dim", "attention head width", &RunConfig::head_dim),
        ik("t_steps", "diffusion timesteps", &RunConfig::t_steps),
        fk("beta_start", "linear beta schedule start", &RunConfig::beta_start),
        fk("beta_end", "linear beta schedule end", &RunConfig::beta_end),
        ik("d_txt", "text embedding width, even", &RunConfig::d_txt),
        ik("image_patch", "coarse image encoder grid per side", &RunConfig::image_patch),
        ik("d_img", "coarse image feature width", &RunConfig::d_img),
        lk("mapper_hidden", "mapper hidden widths, empty = 4*d_txt twice", &RunConfig::mapper_hidden),
        uk("frozen_seed", "frozen encoder weight seed", &RunConfig::frozen_seed),
        ik("max_tokens", "token positions per caption", &RunConfig::max_tokens),
        ik("clips", "clips to synthesize", &RunConfig::clips),
        fk("min_ratio", "smallest kept subject area fraction, inclusive", &RunConfig::min_ratio),
        fk("max_ratio", "largest kept subject area fraction, inclusive", &RunConfig::max_ratio),
        sk("extra_classes", "subject classes beyond the default nine", &RunConfig::extra_classes),
        ik("test_count", "held-out clip count", &RunConfig::test_count),
        uk("data_seed", "dataset synthesis and split seed", &RunConfig::data_seed),
        ik("stage1_steps", "coarse-stage optimization steps", &RunConfig::stage1_steps),
        ik("stage2_steps", "injection-stage optimization steps", &RunConfig::stage2_steps),
        ik("unified_steps", "single-stage ablation steps", &RunConfig::unified_steps),
        ik("refine_steps", "output-refiner optimization steps", &RunConfig::refine_steps),
        ik("batch_size", "items per optimization step", &RunConfig::batch_size),
        fk("lr", "Adam learning rate", &RunConfig::lr),
        uk("train_seed", "training order and noise seed", &RunConfig::train_seed),
        uk("param_seed", "fresh parameter init seed", &RunConfig::param_seed),
        bk("text_only", "drop image conditioning from training items", &RunConfig::text_only),
        bk("injection", "use prompt-feature injection when the checkpoint provides it",
           &RunConfig::injection),
        bk("value_recursion", "propagate updated values frame to frame in injected attention",
           &RunConfig::value_recursion),
        bk("unified_training", "allow the single-stage ablation (required for --stage unified)",
           &RunConfig::unified_training),
        bk("use_refiner", "apply the output refiner when the checkpoint provides it",
           &RunConfig::use_refiner),
        bk("fresh_prompt_noise", "redraw prompt noise at every sampling step",
           &RunConfig::fresh_prompt_noise),
        ik("sample_steps", "ancestral sampling steps", &RunConfig::sample_steps),
        uk("sample_seed", "default generation seed", &RunConfig::sample_seed),
        ik("metric_d_embed", "metric embedding width", &RunConfig::metric_d_embed),
        ik("metric_patch", "metric image pooling grid per side", &RunConfig::metric_patch),
        uk("clip_seed", "first metric embedder seed", &RunConfig::clip_seed),
        uk("dino_seed", "second metric embedder seed", &RunConfig::dino_seed),
        uk("eval_seed", "held-out generation seed", &RunConfig::eval_seed),
    };
    return keys;
}

inline const ConfigKey* find_key(const std::string& key) {
    for (const auto& k : config_keys())
        if (key == k.key) return &k;
    return nullptr;
}

inline const char* kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::contract: return "contract";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::vocabulary: return "vocabulary";
        case ErrorKind::span: return "span";
        case ErrorKind::schedule: return "schedule";
        case ErrorKind::state: return "state";
        case ErrorKind::plan: return "plan";
        case ErrorKind::parse: return "parse";
        case ErrorKind::split: return "split";
        case ErrorKind::extraction: return "extraction";
        case ErrorKind::metric: return "metric";
        case ErrorKind::version: return "version";
        case ErrorKind::config: return "config";
        case ErrorKind::data: return "data";
    }
    return "unknown";
}

inline int exit_code_for(ErrorKind k) {
    switch (k) {
        case ErrorKind::config: return 2;
        case ErrorKind::data:
        case ErrorKind::parse:
        case ErrorKind::vocabulary:
        case ErrorKind::span:
        case ErrorKind::split:
        case ErrorKind::extraction:
        case ErrorKind::version: return 3;
        default: return 4;
    }
}

inline std::string short_hex(std::uint64_t h) { return hash_hex(h).substr(0, 12); }

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) fail(ErrorKind::data, "cannot create directory " + dir + ": " + ec.message());
}

inline std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

inline bool contains(const std::vector<std::string>& v, const std::string& s) {
    return std::find(v.begin(), v.end(), s) != v.end();
}

} // namespace clidetail

inline RunConfig parse_run_config(const std::string& text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = clidetail::trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            fail(ErrorKind::config, "line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = clidetail::trim(line.substr(0, eq));
        const std::string value = clidetail::trim(line.substr(eq + 1));
        const auto* entry = clidetail::find_key(key);
        if (!entry) fail(ErrorKind::config, "unknown config key '" + key + "'");
        if (!seen.insert(key).second) fail(ErrorKind::config, "duplicate config key '" + key + "'");
        entry->set(cfg, value);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::data, "cannot open config file " + path);
    std::ostringstream os;
    os << is.rdbuf();
    return parse_run_config(os.str());
}

// every key, documented, in table order; parses back to the same config
inline std::string resolved_config_text(const RunConfig& cfg) {
    std::ostringstream os;
    os << "# resolved run config\n";
    for (const auto& k : clidetail::config_keys()) {
        os << k.key << " = " << k.get(cfg) << " # " << k.doc << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// dataset directory glue
// ---------------------------------------------------------------------------

// one kept clip as materialized by cmd_datagen
struct DiskClip {
    std::string clip_id;
    std::string caption;
    int k = 0, n = 0;
    std::string split = "none";
    Tensor<double> video;  // [F,H,W,3]
    Tensor<double> prompt; // [S,S,3] background-cleared subject crop
};

// split_filter "" loads every kept clip, otherwise only those whose split
// matches
inline std::vector<DiskClip> load_clips_dir(const std::string& data_dir,
                                            const std::string& split_filter) {
    const auto rows = read_manifest(clidetail::join_path(data_dir, "manifest.tsv"));
    std::vector<DiskClip> out;
    for (const auto& row : rows) {
        if (row.verdict != Verdict::kept) continue;
        if (!split_filter.empty() && row.split != split_filter) continue;
        DiskClip c;
        c.clip_id = row.clip_id;
        c.caption = row.caption;
        c.k = row.k;
        c.n = row.n;
        c.split = row.split;
        c.video = load_clip(clidetail::join_path(data_dir, "clips/" + row.clip_id + ".pvtb"));
        c.prompt = load_clip(clidetail::join_path(data_dir, "prompts/" + row.clip_id + ".pvtb"));
        out.push_back(std::move(c));
    }
    if (out.empty()) {
        fail(ErrorKind::data, "no kept clips" +
                                  (split_filter.empty() ? std::string()
                                                        : " with split '" + split_filter + "'") +
                                  " in " + data_dir);
    }
    return out;
}

// clips -> training items: clean latents, tokens, span, and (unless
// text_only) the frozen coarse feature plus the prompt latent
inline std::vector<TrainItem<double>> make_train_items(const RunConfig& cfg,
                                                       const Conditioning<double>& cond,
                                                       const Vocabulary& vocab,
                                                       const std::vector<DiskClip>& clips,
                                                       bool text_only) {
    std::vector<TrainItem<double>> items;
    items.reserve(clips.size());
    for (const auto& c : clips) {
        TrainItem<double> it;
        it.latents = encode_frames(c.video);
        it.tokens = vocab.encode(c.caption, cfg.max_tokens);
        if (!text_only) {
            it.k = c.k;
            it.n = c.n;
            it.coarse_feature = cond.encode_image_coarse(c.prompt);
            it.prompt_latent = encode_image(c.prompt);
        }
        items.push_back(std::move(it));
    }
    return items;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

struct DatagenSummary {
    int total = 0;
    int kept = 0;
    int test = 0;
    std::uint64_t manifest = 0;
};

inline DatagenSummary cmd_datagen(const RunConfig& cfg, const std::string& out_dir,
                                  std::ostream& log) {
    cfg.validate();
    const DatasetConfig dcfg = cfg.dataset();
    auto records = synth_generate(cfg.clips, cfg.data_seed, dcfg);
    filter_records(records, dcfg);
    split_manifest(records, cfg.test_count, cfg.data_seed);

    clidetail::ensure_dir(clidetail::join_path(out_dir, "clips"));
    clidetail::ensure_dir(clidetail::join_path(out_dir, "prompts"));
    clidetail::ensure_dir(clidetail::join_path(out_dir, "masks"));
    DatagenSummary sum;
    sum.total = static_cast<int>(records.size());
    for (const auto& rec : records) {
        if (rec.verdict != Verdict::kept) continue;
        ++sum.kept;
        if (rec.split == "test") ++sum.test;
        save_clip(clidetail::join_path(out_dir, "clips/" + rec.clip_id + ".pvtb"), rec.video);
        write_mask(clidetail::join_path(out_dir, "masks/" + rec.clip_id + ".mask"), rec.mask_h,
                   rec.mask_w, rec.mask);
        save_clip(clidetail::join_path(out_dir, "prompts/" + rec.clip_id + ".pvtb"),
                  extract_prompt_image(rec, cfg.latent_size));
    }
    write_manifest(clidetail::join_path(out_dir, "manifest.tsv"), records);
    datadetail::atomic_write_text(clidetail::join_path(out_dir, "resolved.cfg"),
                                  resolved_config_text(cfg));
    sum.manifest = manifest_hash(records);
    log << "datagen: clips=" << sum.total << " kept=" << sum.kept << " test=" << sum.test << '\n';
    log << "seed=" << cfg.data_seed << " config_hash=" << hash_hex(cfg.unet().config_hash())
        << " artifact=" << clidetail::short_hex(sum.manifest) << '\n';
    return sum;
}

struct TrainArgs {
    std::string stage;    // stage1 | stage2 | unified | refine
    std::string data_dir; // as written by cmd_datagen
    std::string in_ckpt;  // required for stage2/refine, optional resume otherwise
    std::string out_ckpt;
};

inline TrainResult cmd_train(const RunConfig& cfg, const TrainArgs& args, std::ostream& log) {
    cfg.validate();
    const std::string& stage = args.stage;
    if (stage != "stage1" && stage != "stage2" && stage != "unified" && stage != "refine") {
        fail(ErrorKind::config, "unknown training stage '" + stage + "'");
    }
    if (stage == "unified" && !cfg.unified_training) {
        fail(ErrorKind::config,
             "the single-stage ablation must be requested explicitly via unified_training=true");
    }
    if (cfg.text_only && (stage == "stage2" || stage == "unified")) {
        fail(ErrorKind::config, "text_only training is incompatible with stage '" + stage + "'");
    }

    const UNetConfig ucfg = cfg.unet();
    const NoiseSchedule sched = cfg.schedule();
    const RefinerConfig rcfg = cfg.refiner();
    const Vocabulary vocab = dataset_vocabulary(cfg.dataset());
    const Conditioning<double> cond(cfg.encoder(vocab.size()));

    ParameterStore<double> store;
    std::vector<std::string> stages_done;
    std::uint64_t ancestor = 0;
    if (!args.in_ckpt.empty()) {
        auto [meta_in, store_in] = load_checkpoint<double>(args.in_ckpt);
        verify_checkpoint(meta_in, ucfg, sched, cfg.beta_start, cfg.beta_end);
        store = std::move(store_in);
        stages_done = meta_in.stages_completed;
        ancestor = store.content_hash();
    } else {
        if (stage == "stage2" || stage == "refine") {
            fail(ErrorKind::config, "stage '" + stage + "' needs an input checkpoint (--in)");
        }
        RngStream root(cfg.param_seed);
        create_unet_params(ucfg, cfg.d_txt, store, root.split(fnv1a("init/unet")));
        cond.create_mapper_params(store, root.split(fnv1a("init/mapper")));
    }
    if (stage == "stage2" && !clidetail::contains(stages_done, "stage1") &&
        !clidetail::contains(stages_done, "unified")) {
        fail(ErrorKind::state, "input checkpoint has not completed stage1");
    }

    StagePlan plan;
    plan.stage = stage;
    plan.batch_size = cfg.batch_size;
    plan.lr = cfg.lr;
    plan.seed = cfg.train_seed;
    plan.steps = stage == "stage1"   ? cfg.stage1_steps
                 : stage == "stage2" ? cfg.stage2_steps
                 : stage == "unified" ? cfg.unified_steps
                                      : cfg.refine_steps;

    const bool train_injection = stage == "stage2" || stage == "unified";
    const bool has_attn = !ucfg.attention_levels.empty();
    if (train_injection) {
        if (!has_attn) fail(ErrorKind::config, "injection training needs at least one attention level");
        if (!store.has(injection_key_name(ucfg.attention_levels.front()))) {
            create_injection_params(ucfg, store);
        }
    }
    if (stage == "refine" && !store.has("refiner/out/w")) {
        build_refiner(rcfg, store, RngStream(cfg.param_seed).split(fnv1a("init/refiner")));
    }
    plan.trainable_tags = stage == "stage1"   ? std::vector<StageTag>{StageTag::stage1}
                          : stage == "stage2" ? std::vector<StageTag>{StageTag::stage2}
                          : stage == "unified"
                              ? std::vector<StageTag>{StageTag::stage1, StageTag::stage2}
                              : std::vector<StageTag>{StageTag::refiner};

    EngineFlags flags;
    flags.injection.recursive = cfg.value_recursion;
    flags.injection.enabled =
        train_injection ||
        (stage == "refine" && cfg.injection && has_attn &&
         store.has(injection_key_name(ucfg.attention_levels.front())));
    flags.use_refiner = stage == "refine";
    flags.fresh_prompt_noise = cfg.fresh_prompt_noise;

    const auto clips = load_clips_dir(args.data_dir, "train");
    const auto items = make_train_items(cfg, cond, vocab, clips, cfg.text_only);

    TrainContext<double> ctx;
    ctx.unet = ucfg;
    ctx.sched = sched;
    ctx.conditioning = &cond;
    ctx.flags = flags;
    ctx.refiner = flags.use_refiner ? &rcfg : nullptr;
    const TrainResult result = run_training(ctx, store, items, plan);

    CheckpointMeta meta;
    meta.config_hash = ucfg.config_hash();
    meta.config_string = ucfg.canonical_string();
    meta.t_steps = cfg.t_steps;
    meta.beta_start = cfg.beta_start;
    meta.beta_end = cfg.beta_end;
    meta.stages_completed = std::move(stages_done);
    if (!clidetail::contains(meta.stages_completed, stage)) meta.stages_completed.push_back(stage);
    if (cfg.text_only && !clidetail::contains(meta.stages_completed, "text_only")) {
        meta.stages_completed.push_back("text_only");
    }
    meta.ancestor_hash = ancestor;
    meta.seed = cfg.train_seed;
    save_checkpoint(args.out_ckpt, meta, store);
    datadetail::atomic_write_text(args.out_ckpt + ".cfg", resolved_config_text(cfg));

    log << "train: stage=" << stage << " items=" << items.size() << " steps=" << result.steps_run
        << " first_loss=" << result.first_loss << " last_loss=" << result.last_loss << '\n';
    log << "seed=" << cfg.train_seed << " config_hash=" << hash_hex(meta.config_hash)
        << " artifact=" << clidetail::short_hex(store.content_hash()) << '\n';
    return result;
}

struct SampleArgs {
    std::string ckpt;
    std::string prompt_path; // tensor file [S,S,3]; unused with text_only
    std::string caption;
    std::string out_prefix;
    std::uint64_t seed = 0;
    bool text_only = false;
};

struct SampleOutputs {
    std::uint64_t latent_hash = 0;
    std::uint64_t pixel_hash = 0;
};

inline SampleOutputs cmd_sample(const RunConfig& cfg, const SampleArgs& args, std::ostream& log) {
    cfg.validate();
    auto [meta, store] = load_checkpoint<double>(args.ckpt);
    const UNetConfig ucfg = cfg.unet();
    const NoiseSchedule sched = cfg.schedule();
    verify_checkpoint(meta, ucfg, sched, cfg.beta_start, cfg.beta_end);
    const Vocabulary vocab = dataset_vocabulary(cfg.dataset());
    const Conditioning<double> cond(cfg.encoder(vocab.size()));
    const RefinerConfig rcfg = cfg.refiner();

    const bool text_only =
        args.text_only || clidetail::contains(meta.stages_completed, "text_only");
    EngineFlags flags;
    flags.injection.recursive = cfg.value_recursion;
    flags.injection.enabled = cfg.injection && !text_only && !ucfg.attention_levels.empty() &&
                              store.has(injection_key_name(ucfg.attention_levels.front()));
    flags.use_refiner = cfg.use_refiner && store.has("refiner/out/w");
    flags.fresh_prompt_noise = cfg.fresh_prompt_noise;

    GenerationInputs<double> in;
    if (text_only) {
        in = text_only_inputs(cond, vocab, args.caption);
    } else {
        if (args.prompt_path.empty()) {
            fail(ErrorKind::config, "sample needs --prompt unless --text-only is set");
        }
        const auto prompt = load_clip(args.prompt_path);
        const auto span = parse_subject_span(args.caption, cfg.dataset().all_classes());
        in = build_generation_inputs(cond, store, vocab, ucfg, args.caption, span.k, span.n, prompt);
    }

    const auto latents =
        generate_video(ucfg, store, sched, in, flags, args.seed, cfg.sample_steps, &rcfg);
    const auto pixels = decode_frames(latents);
    save_clip(args.out_prefix + ".latent.pvtb", latents);
    write_frame_grid(args.out_prefix + ".ppm", pixels);
    datadetail::atomic_write_text(args.out_prefix + ".cfg", resolved_config_text(cfg));

    SampleOutputs out{tensor_hash(latents), tensor_hash(pixels)};
    log << "sample: caption=\"" << args.caption << "\" injection="
        << (flags.injection.enabled ? "on" : "off") << " refiner="
        << (flags.use_refiner ? "on" : "off") << " steps=" << cfg.sample_steps << '\n';
    log << "seed=" << args.seed << " config_hash=" << hash_hex(meta.config_hash)
        << " artifact=" << clidetail::short_hex(out.latent_hash) << '\n';
    return out;
}

struct EvalArgs {
    std::string data_dir;
    std::vector<std::pair<std::string, std::string>> ckpts; // (name, path)
    std::string out_dir;
    bool emit_frames = false;
};

// scores each checkpoint's generations on the held-out split and writes
// per-clip records plus a paired comparison table
inline std::vector<std::pair<std::string, MetricReport>> cmd_eval(const RunConfig& cfg,
                                                                  const EvalArgs& args,
                                                                  std::ostream& log) {
    cfg.validate();
    if (args.ckpts.empty()) fail(ErrorKind::config, "eval needs at least one --ckpt");
    const auto clips = load_clips_dir(args.data_dir, "test");
    const UNetConfig ucfg = cfg.unet();
    const NoiseSchedule sched = cfg.schedule();
    const Vocabulary vocab = dataset_vocabulary(cfg.dataset());
    const Conditioning<double> cond(cfg.encoder(vocab.size()));
    const RefinerConfig rcfg = cfg.refiner();
    const auto metric_pair = build_metric_pair(cfg.metric(vocab.size()));
    clidetail::ensure_dir(args.out_dir);

    std::vector<std::pair<std::string, MetricReport>> reports;
    for (const auto& [name, path] : args.ckpts) {
        auto [meta, store] = load_checkpoint<double>(path);
        verify_checkpoint(meta, ucfg, sched, cfg.beta_start, cfg.beta_end);
        const bool text_only = clidetail::contains(meta.stages_completed, "text_only");
        EngineFlags flags;
        flags.injection.recursive = cfg.value_recursion;
        flags.injection.enabled = cfg.injection && !text_only && !ucfg.attention_levels.empty() &&
                                  store.has(injection_key_name(ucfg.attention_levels.front()));
        flags.use_refiner = cfg.use_refiner && store.has("refiner/out/w");
        flags.fresh_prompt_noise = cfg.fresh_prompt_noise;

        std::vector<ClipScores> scores;
        for (std::size_t i = 0; i < clips.size(); ++i) {
            const auto& c = clips[i];
            GenerationInputs<double> in =
                text_only ? text_only_inputs(cond, vocab, c.caption)
                          : build_generation_inputs(cond, store, vocab, ucfg, c.caption, c.k, c.n,
                                                    c.prompt);
            // one generation seed per clip, shared across checkpoints so the
            // comparison is paired on identical noise
            const std::uint64_t gseed =
                cfg.eval_seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(i) * 2 + 1;
            const auto latents =
                generate_video(ucfg, store, sched, in, flags, gseed, cfg.sample_steps, &rcfg);
            const auto pixels = decode_frames(latents);
            scores.push_back({c.clip_id,
                              clip_text_score(metric_pair, pixels, vocab.encode(c.caption, cfg.max_tokens)),
                              clip_image_score(metric_pair, pixels, c.prompt),
                              dino_like_score(metric_pair, pixels, c.prompt)});
            if (args.emit_frames) {
                write_frame_grid(
                    clidetail::join_path(args.out_dir, name + "_" + c.clip_id + ".ppm"), pixels);
            }
        }
        auto rep = aggregate_report(std::move(scores), metric_pair.embedder_hash());
        datadetail::atomic_write_text(clidetail::join_path(args.out_dir, "eval_" + name + ".tsv"),
                                      report_lines(rep));
        reports.emplace_back(name, std::move(rep));
    }

    std::ostringstream rp;
    if (reports.size() == 1) {
        const auto& [name, rep] = reports.front();
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-12s %14s %14s %14s\n", "model", "clip_text", "clip_image",
                      "dino");
        rp << buf;
        std::snprintf(buf, sizeof(buf), "%-12s %14.4f %14.4f %14.4f\nclips: %d\n", name.c_str(),
                      rep.clip_text_mean, rep.clip_image_mean, rep.dino_mean, rep.count);
        rp << buf;
    } else {
        for (std::size_t i = 0; i < reports.size(); ++i)
            for (std::size_t j = i + 1; j < reports.size(); ++j)
                rp << paired_table(reports[i].first, reports[i].second, reports[j].first,
                                   reports[j].second)
                   << '\n';
    }
    datadetail::atomic_write_text(clidetail::join_path(args.out_dir, "report.txt"), rp.str());
    datadetail::atomic_write_text(clidetail::join_path(args.out_dir, "resolved.cfg"),
                                  resolved_config_text(cfg));
    log << rp.str();
    log << "seed=" << cfg.eval_seed << " config_hash=" << hash_hex(ucfg.config_hash())
        << " artifact=" << clidetail::short_hex(fnv1a(rp.str())) << '\n';
    return reports;
}

inline std::string inspect_checkpoint(const std::string& path) {
    auto [meta, store] = load_checkpoint<double>(path);
    std::ostringstream os;
    os << "checkpoint " << path << '\n';
    os << "  format version " << meta.version << '\n';
    os << "  config " << meta.config_string << " (hash " << hash_hex(meta.config_hash) << ")\n";
    os << "  schedule T=" << meta.t_steps << " beta=[" << clidetail::fmt_f64(meta.beta_start) << ","
       << clidetail::fmt_f64(meta.beta_end) << "]\n";
    os << "  stages completed:";
    if (meta.stages_completed.empty()) os << " (none)";
    for (const auto& s : meta.stages_completed) os << ' ' << s;
    os << '\n';
    os << "  training seed " << meta.seed << '\n';
    os << "  ancestor " << (meta.ancestor_hash ? hash_hex(meta.ancestor_hash) : "(fresh)") << '\n';
    for (StageTag tag :
         {StageTag::frozen, StageTag::stage1, StageTag::stage2, StageTag::refiner}) {
        const auto names = store.names_with_tag(tag);
        std::int64_t scalars = 0;
        for (const auto& n : names) scalars += store.get(n).numel();
        os << "  " << to_string(tag) << ": " << names.size() << " tensors, " << scalars
           << " scalars, subset " << hash_hex(store.subset_hash(names)) << '\n';
    }
    os << "  content hash " << hash_hex(store.content_hash()) << " artifact "
       << clidetail::short_hex(store.content_hash()) << '\n';
    return os.str();
}

// name=path, or a bare path whose stem becomes the name
inline std::vector<std::pair<std::string, std::string>> parse_ckpt_specs(
    const std::vector<std::string>& specs) {
    std::vector<std::pair<std::string, std::string>> out;
    std::set<std::string> names;
    for (const auto& s : specs) {
        const std::size_t eq = s.find('=');
        std::string name, path;
        if (eq == std::string::npos) {
            path = s;
            name = std::filesystem::path(s).stem().string();
        } else {
            name = s.substr(0, eq);
            path = s.substr(eq + 1);
        }
        if (name.empty() || path.empty()) fail(ErrorKind::config, "bad checkpoint spec '" + s + "'");
        if (!names.insert(name).second) {
            fail(ErrorKind::config, "duplicate checkpoint name '" + name + "'");
        }
        out.emplace_back(std::move(name), std::move(path));
    }
    return out;
}

int cli_main(std::vector<std::string> args); // defined in src/cli.cpp

} // namespace promptvid
