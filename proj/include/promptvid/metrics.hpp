#pragma once

// Frame-averaged alignment metrics over frozen toy embedders: a text-to-clip
// score, an image-to-clip score, and a second image score in an independent
// embedding space. All three are cosine similarities scaled by 100 and
// averaged over frames. The embedders are bias-free linear maps, so scores
// are exactly invariant to power-of-two input scaling; absolute values are
// only meaningful as paired comparisons between models on the same test set,
// which is how the reports print them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "promptvid/conditioning.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/rng.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

struct MetricConfig {
    int vocab_size = 0;
    int d_embed = 16;
    int patch = 4; // pooled grid resolution per side
    std::uint64_t clip_seed = 501;
    std::uint64_t dino_seed = 777;

    void validate() const {
        if (vocab_size < 1) fail(ErrorKind::config, "metric vocab_size must be >= 1");
        if (d_embed < 1) fail(ErrorKind::config, "metric d_embed must be >= 1");
        if (patch < 1) fail(ErrorKind::config, "metric patch must be >= 1");
        if (clip_seed == dino_seed) {
            fail(ErrorKind::config, "the two embedder seeds must differ to span independent spaces");
        }
    }

    std::string canonical_string() const {
        std::ostringstream os;
        os << "metrics(v" << vocab_size << ",d" << d_embed << ",p" << patch << ",c" << clip_seed
           << ",n" << dino_seed << ")";
        return os.str();
    }
};

// One frozen embedder: a token table for captions and a bias-free linear
// projection of an adaptively pooled patch grid for images.
template <class T>
class MetricEmbedder {
public:
    MetricEmbedder(int vocab_size, int d_embed, int patch, std::uint64_t seed) : patch_(patch) {
        if (vocab_size < 1 || d_embed < 1 || patch < 1) {
            fail(ErrorKind::config, "embedder extents must be positive");
        }
        RngStream root(seed);
        {
            RngStream s = root.split(fnv1a("metric/text_table"));
            text_table_ = Tensor<T>::randn({vocab_size, d_embed}, s,
                                           1.0 / std::sqrt(static_cast<double>(d_embed)));
        }
        {
            RngStream s = root.split(fnv1a("metric/image_projection"));
            const int in_width = patch * patch * 3;
            img_w_ = Tensor<T>::randn({in_width, d_embed}, s,
                                      1.0 / std::sqrt(static_cast<double>(in_width)));
        }
    }

    // test hook: embedder with hand-chosen weights
    static MetricEmbedder from_weights(Tensor<T> text_table, Tensor<T> img_w, int patch) {
        if (text_table.rank() != 2 || img_w.rank() != 2 ||
            img_w.extent(0) != static_cast<std::int64_t>(patch) * patch * 3 ||
            text_table.extent(1) != img_w.extent(1)) {
            fail(ErrorKind::dimension, "embedder weights must be [vocab,d] and [patch*patch*3,d]");
        }
        MetricEmbedder e;
        e.patch_ = patch;
        e.text_table_ = std::move(text_table);
        e.img_w_ = std::move(img_w);
        return e;
    }

    int d_embed() const { return static_cast<int>(text_table_.extent(1)); }
    int patch() const { return patch_; }

    std::uint64_t weight_hash() const {
        std::uint64_t h = fnv1a("metric-embedder");
        const std::uint64_t a = tensor_hash(text_table_), b = tensor_hash(img_w_);
        h = fnv1a(&a, sizeof a, h);
        h = fnv1a(&b, sizeof b, h);
        h = fnv1a(&patch_, sizeof patch_, h);
        return h;
    }

    // mean of the live-token table rows
    Tensor<T> embed_tokens(const TextTokenSeq& tokens) const {
        const int d = d_embed();
        std::vector<T> out(static_cast<std::size_t>(d), T(0));
        int live = 0;
        for (std::size_t p = 0; p < tokens.token_ids.size(); ++p) {
            if (tokens.pad_mask[p]) continue;
            const int id = tokens.token_ids[p];
            if (id < 0 || id >= text_table_.extent(0)) {
                fail(ErrorKind::vocabulary, "token id " + std::to_string(id) +
                                                " outside the metric table of size " +
                                                std::to_string(text_table_.extent(0)));
            }
            for (int j = 0; j < d; ++j)
                out[static_cast<std::size_t>(j)] +=
                    text_table_.value_at(static_cast<std::int64_t>(id) * d + j);
            ++live;
        }
        if (live == 0) fail(ErrorKind::metric, "caption has no live tokens to embed");
        for (auto& x : out) x = static_cast<T>(static_cast<double>(x) / live);
        return Tensor<T>::from({d}, std::move(out));
    }

    // adaptive patch-average to a patch x patch grid, then the bias-free
    // linear projection
    Tensor<T> embed_image(const Tensor<T>& image_hwc) const {
        if (image_hwc.rank() != 3 || image_hwc.extent(2) != 3 || image_hwc.extent(0) < 1 ||
            image_hwc.extent(1) < 1) {
            fail(ErrorKind::dimension, "metric image must be [H,W,3], got " + to_string(image_hwc.shape()));
        }
        const std::int64_t H = image_hwc.extent(0), W = image_hwc.extent(1);
        const int g = patch_;
        const auto& img = image_hwc.values();
        std::vector<double> pooled(static_cast<std::size_t>(g) * g * 3);
        for (int gi = 0; gi < g; ++gi) {
            std::int64_t r0 = gi * H / g, r1 = (gi + 1) * H / g;
            if (r1 <= r0) {
                r0 = std::min<std::int64_t>(r0, H - 1);
                r1 = r0 + 1;
            }
            for (int gj = 0; gj < g; ++gj) {
                std::int64_t c0 = gj * W / g, c1 = (gj + 1) * W / g;
                if (c1 <= c0) {
                    c0 = std::min<std::int64_t>(c0, W - 1);
                    c1 = c0 + 1;
                }
                for (int ch = 0; ch < 3; ++ch) {
                    double acc = 0.0;
                    for (std::int64_t r = r0; r < r1; ++r)
                        for (std::int64_t c = c0; c < c1; ++c)
                            acc += static_cast<double>(
                                img[static_cast<std::size_t>((r * W + c) * 3 + ch)]);
                    pooled[static_cast<std::size_t>((gi * g + gj) * 3 + ch)] =
                        acc / static_cast<double>((r1 - r0) * (c1 - c0));
                }
            }
        }
        const int d = d_embed();
        const int in_width = g * g * 3;
        std::vector<T> out(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int i = 0; i < in_width; ++i)
                acc += pooled[static_cast<std::size_t>(i)] *
                       static_cast<double>(img_w_.value_at(static_cast<std::int64_t>(i) * d + j));
            out[static_cast<std::size_t>(j)] = static_cast<T>(acc);
        }
        return Tensor<T>::from({d}, std::move(out));
    }

private:
    MetricEmbedder() = default;
    int patch_ = 0;
    Tensor<T> text_table_;
    Tensor<T> img_w_;
};

template <class T>
double cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.extent(0) != b.extent(0)) {
        fail(ErrorKind::dimension, "cosine needs equal-length vectors, got " + to_string(a.shape()) +
                                       " vs " + to_string(b.shape()));
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double x = static_cast<double>(a.value_at(i)), y = static_cast<double>(b.value_at(i));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) fail(ErrorKind::metric, "zero-norm embedding in cosine similarity");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// The two frozen embedding spaces used by the three scores.
template <class T>
struct MetricPair {
    MetricEmbedder<T> clip;
    MetricEmbedder<T> dino;

    std::uint64_t embedder_hash() const {
        std::uint64_t h = fnv1a("metric-pair");
        const std::uint64_t a = clip.weight_hash(), b = dino.weight_hash();
        h = fnv1a(&a, sizeof a, h);
        h = fnv1a(&b, sizeof b, h);
        return h;
    }
};

template <class T = double>
MetricPair<T> build_metric_pair(const MetricConfig& cfg) {
    cfg.validate();
    return {MetricEmbedder<T>(cfg.vocab_size, cfg.d_embed, cfg.patch, cfg.clip_seed),
            MetricEmbedder<T>(cfg.vocab_size, cfg.d_embed, cfg.patch, cfg.dino_seed)};
}

namespace metricdetail {

template <class T>
Tensor<T> frame_slice(const Tensor<T>& video, int f) {
    const std::int64_t H = video.extent(1), W = video.extent(2);
    const auto& v = video.values();
    const std::size_t n = static_cast<std::size_t>(H * W * 3);
    std::vector<T> out(v.begin() + static_cast<std::ptrdiff_t>(n) * f,
                       v.begin() + static_cast<std::ptrdiff_t>(n) * (f + 1));
    return Tensor<T>::from({H, W, 3}, std::move(out));
}

template <class T>
void require_video(const Tensor<T>& video) {
    if (video.rank() != 4 || video.extent(3) != 3 || video.extent(0) < 1) {
        fail(ErrorKind::dimension, "metric video must be [F,H,W,3], got " + to_string(video.shape()));
    }
}

template <class T>
double frame_mean_cosine(const MetricEmbedder<T>& e, const Tensor<T>& video, const Tensor<T>& ref) {
    const int F = static_cast<int>(video.extent(0));
    double acc = 0.0;
    for (int f = 0; f < F; ++f) acc += cosine_similarity(ref, e.embed_image(frame_slice(video, f)));
    return 100.0 * acc / static_cast<double>(F);
}

} // namespace metricdetail

// mean over frames of cosine(text embedding, frame embedding) x 100
template <class T>
double clip_text_score(const MetricPair<T>& m, const Tensor<T>& video, const TextTokenSeq& tokens) {
    metricdetail::require_video(video);
    return metricdetail::frame_mean_cosine(m.clip, video, m.clip.embed_tokens(tokens));
}

// mean over frames of cosine(prompt embedding, frame embedding) x 100
template <class T>
double clip_image_score(const MetricPair<T>& m, const Tensor<T>& video, const Tensor<T>& prompt_hwc) {
    metricdetail::require_video(video);
    return metricdetail::frame_mean_cosine(m.clip, video, m.clip.embed_image(prompt_hwc));
}

// the same image comparison in the second, independent embedding space
template <class T>
double dino_like_score(const MetricPair<T>& m, const Tensor<T>& video, const Tensor<T>& prompt_hwc) {
    metricdetail::require_video(video);
    return metricdetail::frame_mean_cosine(m.dino, video, m.dino.embed_image(prompt_hwc));
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

struct ClipScores {
    std::string clip_id;
    double clip_text = 0.0;
    double clip_image = 0.0;
    double dino = 0.0;
};

struct MetricReport {
    std::vector<ClipScores> per_clip;
    double clip_text_mean = 0.0;
    double clip_image_mean = 0.0;
    double dino_mean = 0.0;
    int count = 0;
    std::uint64_t embedder_hash = 0;
};

inline MetricReport aggregate_report(std::vector<ClipScores> per_clip, std::uint64_t embedder_hash) {
    if (per_clip.empty()) fail(ErrorKind::contract, "cannot aggregate an empty score list");
    MetricReport rep;
    rep.count = static_cast<int>(per_clip.size());
    for (const auto& s : per_clip) {
        rep.clip_text_mean += s.clip_text;
        rep.clip_image_mean += s.clip_image;
        rep.dino_mean += s.dino;
    }
    rep.clip_text_mean /= rep.count;
    rep.clip_image_mean /= rep.count;
    rep.dino_mean /= rep.count;
    rep.per_clip = std::move(per_clip);
    rep.embedder_hash = embedder_hash;
    return rep;
}

// machine-readable per-clip records
inline std::string report_lines(const MetricReport& rep) {
    std::ostringstream os;
    char buf[128];
    for (const auto& s : rep.per_clip) {
        std::snprintf(buf, sizeof(buf), "%s\t%.10g\t%.10g\t%.10g\n", s.clip_id.c_str(), s.clip_text,
                      s.clip_image, s.dino);
        os << buf;
    }
    return os.str();
}

// paired comparison of two models on the same test set
inline std::string paired_table(const std::string& name_a, const MetricReport& a,
                                const std::string& name_b, const MetricReport& b) {
    if (a.count != b.count) {
        fail(ErrorKind::contract, "paired comparison needs equal clip counts, got " +
                                      std::to_string(a.count) + " vs " + std::to_string(b.count));
    }
    std::ostringstream os;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-12s %14s %14s %10s\n", "metric", name_a.c_str(), name_b.c_str(),
                  "delta");
    os << buf << std::string(53, '-') << '\n';
    auto row = [&](const char* metric, double va, double vb) {
        std::snprintf(buf, sizeof(buf), "%-12s %14.4f %14.4f %+10.4f\n", metric, va, vb, va - vb);
        os << buf;
    };
    row("clip_text", a.clip_text_mean, b.clip_text_mean);
    row("clip_image", a.clip_image_mean, b.clip_image_mean);
    row("dino", a.dino_mean, b.dino_mean);
    std::snprintf(buf, sizeof(buf), "clips: %d\n", a.count);
    os << buf;
    return os.str();
}

} // namespace promptvid
