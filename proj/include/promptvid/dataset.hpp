#pragma once

// Synthetic clip corpus plus the curation pipeline: first-frame subject
// masks that are exact by construction, caption span parsing with a small
// deterministic grammar, size/keyword filtering, prompt-image extraction
// onto a clean background, seeded train/test splitting, and the manifest /
// mask / pixmap file formats.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "promptvid/conditioning.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/rng.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

// ---------------------------------------------------------------------------
// lexicons and configuration
// ---------------------------------------------------------------------------

// The nine accepted subject classes.
inline const std::vector<std::string>& subject_keyword_classes() {
    static const std::vector<std::string> k = {"dog",   "cat",   "bear",     "car",  "panda",
                                               "tiger", "horse", "elephant", "lion"};
    return k;
}

inline const std::vector<std::string>& caption_adjectives() {
    static const std::vector<std::string> a = {"red",    "blue", "green", "golden",
                                               "fluffy", "tiny", "giant", "papillon"};
    return a;
}

inline const std::vector<std::string>& caption_verb_phrases() {
    static const std::vector<std::string> v = {"runs across the field", "walks near the river",
                                               "jumps over rocks",      "plays in the garden",
                                               "moves through snow",    "rests under palm leaves"};
    return v;
}

struct DatasetConfig {
    int frames = 8;
    int height = 32;
    int width = 32;
    int prompt_size = 32; // prompt images are resized to prompt_size x prompt_size
    double min_ratio = 0.05;
    double max_ratio = 0.85;
    // accepted keyword classes; synthesis also draws from extra_classes,
    // which the filter then rejects
    std::vector<std::string> classes = subject_keyword_classes();
    std::vector<std::string> extra_classes;

    std::vector<std::string> all_classes() const {
        std::vector<std::string> out = classes;
        out.insert(out.end(), extra_classes.begin(), extra_classes.end());
        return out;
    }

    void validate() const {
        if (frames < 1) fail(ErrorKind::config, "frames must be >= 1");
        if (height < 4 || width < 4) fail(ErrorKind::config, "clip extents must be >= 4");
        if (prompt_size < 1) fail(ErrorKind::config, "prompt_size must be >= 1");
        if (!(min_ratio >= 0.0) || !(max_ratio <= 1.0) || !(min_ratio <= max_ratio)) {
            fail(ErrorKind::config, "need 0 <= min_ratio <= max_ratio <= 1");
        }
        if (classes.empty()) fail(ErrorKind::config, "at least one subject class is required");
    }
};

// Shared token list for synthesis, training, and evaluation: the null token,
// determiners, adjectives, subject classes, then verb-phrase words, in a
// fixed order with duplicates dropped.
inline Vocabulary dataset_vocabulary(const DatasetConfig& cfg) {
    std::vector<std::string> toks = {"<null>", "a", "the"};
    auto push_unique = [&](const std::string& w) {
        if (std::find(toks.begin(), toks.end(), w) == toks.end()) toks.push_back(w);
    };
    for (const auto& w : caption_adjectives()) push_unique(w);
    for (const auto& w : cfg.all_classes()) push_unique(w);
    for (const auto& phrase : caption_verb_phrases())
        for (const auto& w : Vocabulary::split_words(phrase)) push_unique(w);
    return Vocabulary::from_tokens(std::move(toks));
}

// ---------------------------------------------------------------------------
// records
// ---------------------------------------------------------------------------

enum class Verdict { kept, too_small, too_large, class_rejected };

inline const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::kept: return "kept";
        case Verdict::too_small: return "too_small";
        case Verdict::too_large: return "too_large";
        case Verdict::class_rejected: return "class_rejected";
    }
    return "?";
}

inline Verdict verdict_from_string(const std::string& s) {
    if (s == "kept") return Verdict::kept;
    if (s == "too_small") return Verdict::too_small;
    if (s == "too_large") return Verdict::too_large;
    if (s == "class_rejected") return Verdict::class_rejected;
    fail(ErrorKind::parse, "unknown verdict '" + s + "'");
}

struct ClipRecord {
    std::string clip_id;
    Tensor<double> video; // [F, H, W, 3], values in [0, 1]
    std::string caption;
    int k = 0, n = 0; // subject span over the caption's words
    std::string subject_class;
    std::vector<std::uint8_t> mask; // first-frame subject mask, H*W row-major
    int mask_h = 0, mask_w = 0;
    double area_ratio = 0.0;
    Verdict verdict = Verdict::kept;
    std::string split = "none"; // none | train | test
};

struct CaptionParse {
    std::vector<std::string> words;
    int k = 0, n = 0;
    std::string head_noun;
};

// Grammar: optional determiner, zero or more lexicon adjectives, then a head
// noun from the class lexicon. The span is the first such chunk, excluding
// the determiner.
inline CaptionParse parse_subject_span(const std::string& caption,
                                       const std::vector<std::string>& class_lexicon,
                                       const std::vector<std::string>& adjectives = caption_adjectives()) {
    CaptionParse out;
    out.words = Vocabulary::split_words(caption);
    int head = -1;
    for (std::size_t i = 0; i < out.words.size(); ++i) {
        if (std::find(class_lexicon.begin(), class_lexicon.end(), out.words[i]) != class_lexicon.end()) {
            head = static_cast<int>(i);
            break;
        }
    }
    if (head < 0) {
        fail(ErrorKind::parse, "caption '" + caption + "' has no subject noun from the class lexicon");
    }
    int k = head;
    while (k > 0 && std::find(adjectives.begin(), adjectives.end(),
                              out.words[static_cast<std::size_t>(k - 1)]) != adjectives.end()) {
        --k;
    }
    out.k = k;
    out.n = head - k + 1;
    out.head_noun = out.words[static_cast<std::size_t>(head)];
    return out;
}

// ---------------------------------------------------------------------------
// rendering
// ---------------------------------------------------------------------------

struct SubjectSpec {
    bool ellipse = false;
    int r0 = 0, c0 = 0, r1 = 0, c1 = 0; // first-frame bounding box, exclusive ends
    int dr = 0, dc = 0;                 // per-frame velocity in pixels
};

namespace datadetail {

// deterministic texture value in [0, 1): splitmix-style mixing of the
// coordinates and a per-clip salt, no libm involved
inline double hash_frac(std::uint64_t a, std::uint64_t b, std::uint64_t c, std::uint64_t salt) {
    std::uint64_t x = salt;
    for (std::uint64_t w : {a, b, c}) {
        x += w + 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        x ^= x >> 31;
    }
    return static_cast<double>(x >> 11) * 0x1.0p-53;
}

inline bool inside_subject(const SubjectSpec& spec, int r, int c, int br0, int bc0) {
    const int bh = spec.r1 - spec.r0, bw = spec.c1 - spec.c0;
    if (r < br0 || r >= br0 + bh || c < bc0 || c >= bc0 + bw) return false;
    if (!spec.ellipse) return true;
    const double a = bh / 2.0, b = bw / 2.0;
    const double cr = br0 + a, cc = bc0 + b;
    const double dr = (r + 0.5 - cr) / a, dc = (c + 0.5 - cc) / b;
    return dr * dr + dc * dc <= 1.0;
}

} // namespace datadetail

struct RenderedClip {
    Tensor<double> video;           // [F, H, W, 3]
    std::vector<std::uint8_t> mask; // first-frame subject mask
};

// Textured subject (rectangle or pixel-center-sampled ellipse) translating
// over a textured static background. The subject's texture is anchored in
// its own coordinate frame, so the pattern moves rigidly with it; the box is
// clamped so the subject never leaves the frame.
inline RenderedClip render_clip(const DatasetConfig& cfg, const SubjectSpec& spec, std::uint64_t salt) {
    const int H = cfg.height, W = cfg.width, F = cfg.frames;
    if (spec.r0 < 0 || spec.c0 < 0 || spec.r1 <= spec.r0 || spec.c1 <= spec.c0 || spec.r1 > H ||
        spec.c1 > W) {
        fail(ErrorKind::contract, "subject box outside the frame");
    }
    const int bh = spec.r1 - spec.r0, bw = spec.c1 - spec.c0;

    std::vector<double> px(static_cast<std::size_t>(F) * H * W * 3);
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(H) * W, 0);
    double base[3];
    for (int ch = 0; ch < 3; ++ch)
        base[ch] = 0.45 + 0.35 * datadetail::hash_frac(7, 7, static_cast<std::uint64_t>(ch), salt ^ 0xba5eull);

    for (int f = 0; f < F; ++f) {
        const int br0 = std::clamp(spec.r0 + f * spec.dr, 0, H - bh);
        const int bc0 = std::clamp(spec.c0 + f * spec.dc, 0, W - bw);
        for (int r = 0; r < H; ++r) {
            for (int c = 0; c < W; ++c) {
                const bool in = datadetail::inside_subject(spec, r, c, br0, bc0);
                if (f == 0 && in) mask[static_cast<std::size_t>(r) * W + c] = 1;
                for (int ch = 0; ch < 3; ++ch) {
                    double v;
                    if (in) {
                        const std::uint64_t u = static_cast<std::uint64_t>(r - br0);
                        const std::uint64_t w = static_cast<std::uint64_t>(c - bc0);
                        v = base[ch] +
                            0.2 * datadetail::hash_frac(u, w, static_cast<std::uint64_t>(ch), salt ^ 0x50bull);
                    } else {
                        // two texture scales: 4x4 blocks plus per-pixel grain
                        v = 0.08 +
                            0.3 * datadetail::hash_frac(static_cast<std::uint64_t>(r / 4),
                                                        static_cast<std::uint64_t>(c / 4),
                                                        static_cast<std::uint64_t>(ch), salt) +
                            0.08 * datadetail::hash_frac(static_cast<std::uint64_t>(r),
                                                         static_cast<std::uint64_t>(c),
                                                         static_cast<std::uint64_t>(ch), salt ^ 0x97a1ull);
                    }
                    px[static_cast<std::size_t>(((f * H + r) * W + c) * 3 + ch)] = std::clamp(v, 0.0, 1.0);
                }
            }
        }
    }
    return {Tensor<double>::from({F, H, W, 3}, std::move(px)), std::move(mask)};
}

// ---------------------------------------------------------------------------
// synthesis
// ---------------------------------------------------------------------------

inline std::string clip_id_for(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "clip_%06zu", index);
    return buf;
}

// Deterministic corpus: one subject per clip, caption templated as
// "[determiner] <adjective> <class> <verb phrase>", subject sizes spread
// across the filter thresholds so every verdict occurs.
inline std::vector<ClipRecord> synth_generate(int n_clips, std::uint64_t seed, const DatasetConfig& cfg) {
    cfg.validate();
    if (n_clips < 0) fail(ErrorKind::contract, "n_clips must be >= 0");
    const auto classes = cfg.all_classes();
    std::vector<ClipRecord> out;
    out.reserve(static_cast<std::size_t>(n_clips));
    RngStream root(seed);

    for (int i = 0; i < n_clips; ++i) {
        RngStream rng = root.split(static_cast<std::uint64_t>(i));
        ClipRecord rec;
        rec.clip_id = clip_id_for(static_cast<std::size_t>(i));
        rec.subject_class = classes[static_cast<std::size_t>(rng.uniform_index(classes.size()))];

        SubjectSpec spec;
        spec.ellipse = rng.uniform() < 0.5;
        const double ratio = 0.01 + 0.94 * rng.uniform(); // spans both filter thresholds
        const double aspect = 0.6 + 0.8 * rng.uniform();
        int bh = static_cast<int>(std::lround(std::sqrt(ratio * cfg.height * cfg.width * aspect)));
        int bw = static_cast<int>(std::lround(std::sqrt(ratio * cfg.height * cfg.width / aspect)));
        bh = std::clamp(bh, 1, cfg.height);
        bw = std::clamp(bw, 1, cfg.width);
        spec.r0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg.height - bh + 1)));
        spec.c0 = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(cfg.width - bw + 1)));
        spec.r1 = spec.r0 + bh;
        spec.c1 = spec.c0 + bw;
        spec.dr = static_cast<int>(rng.uniform_index(5)) - 2;
        spec.dc = static_cast<int>(rng.uniform_index(5)) - 2;

        const std::uint64_t salt =
            seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(i) * 0xbf58476d1ce4e5b9ull + 1;
        auto rendered = render_clip(cfg, spec, salt);
        rec.video = std::move(rendered.video);
        rec.mask = std::move(rendered.mask);
        rec.mask_h = cfg.height;
        rec.mask_w = cfg.width;
        std::size_t area = 0;
        for (auto m : rec.mask) area += m;
        rec.area_ratio = static_cast<double>(area) / (static_cast<double>(cfg.height) * cfg.width);

        const auto& adjs = caption_adjectives();
        const auto& verbs = caption_verb_phrases();
        std::string caption;
        if (rng.uniform() < 0.5) caption += "the ";
        caption += adjs[static_cast<std::size_t>(rng.uniform_index(adjs.size()))];
        caption += " " + rec.subject_class;
        caption += " " + verbs[static_cast<std::size_t>(rng.uniform_index(verbs.size()))];
        rec.caption = caption;
        auto parse = parse_subject_span(caption, classes);
        rec.k = parse.k;
        rec.n = parse.n;
        out.push_back(std::move(rec));
    }
    return out;
}

// ---------------------------------------------------------------------------
// curation
// ---------------------------------------------------------------------------

// Ratio thresholds first, then the keyword check on the parsed head noun.
// Captions without a recognizable subject chunk fall under class_rejected.
inline void filter_records(std::vector<ClipRecord>& records, const DatasetConfig& cfg) {
    const auto lexicon = cfg.all_classes();
    for (auto& rec : records) {
        if (rec.area_ratio < cfg.min_ratio) {
            rec.verdict = Verdict::too_small;
        } else if (rec.area_ratio > cfg.max_ratio) {
            rec.verdict = Verdict::too_large;
        } else {
            std::string head;
            try {
                head = parse_subject_span(rec.caption, lexicon).head_noun;
            } catch (const Error&) {
                head.clear();
            }
            const bool accepted = !head.empty() && std::find(cfg.classes.begin(), cfg.classes.end(),
                                                             head) != cfg.classes.end();
            rec.verdict = accepted ? Verdict::kept : Verdict::class_rejected;
        }
    }
}

// First-frame pixels under the mask composited onto a zero background,
// cropped to the mask's bounding box, nearest-resized to size x size.
inline Tensor<double> extract_prompt_image(const ClipRecord& rec, int size) {
    if (size < 1) fail(ErrorKind::contract, "prompt size must be >= 1");
    const int H = rec.mask_h, W = rec.mask_w;
    if (H < 1 || W < 1 || rec.mask.size() != static_cast<std::size_t>(H) * W) {
        fail(ErrorKind::dimension, "record mask extents do not match its mask data");
    }
    if (!rec.video.defined() || rec.video.rank() != 4 || rec.video.extent(1) != H ||
        rec.video.extent(2) != W || rec.video.extent(3) != 3) {
        fail(ErrorKind::dimension, "record video must be [F," + std::to_string(H) + "," +
                                       std::to_string(W) + ",3]");
    }
    int rmin = H, rmax = -1, cmin = W, cmax = -1;
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            if (rec.mask[static_cast<std::size_t>(r) * W + c]) {
                rmin = std::min(rmin, r);
                rmax = std::max(rmax, r);
                cmin = std::min(cmin, c);
                cmax = std::max(cmax, c);
            }
    if (rmax < 0) fail(ErrorKind::extraction, "record '" + rec.clip_id + "' has an empty subject mask");

    const int bh = rmax - rmin + 1, bw = cmax - cmin + 1;
    const auto& v = rec.video.values();
    std::vector<double> px(static_cast<std::size_t>(size) * size * 3, 0.0);
    for (int i = 0; i < size; ++i) {
        const int r = rmin + static_cast<int>((static_cast<std::int64_t>(i) * bh) / size);
        for (int j = 0; j < size; ++j) {
            const int c = cmin + static_cast<int>((static_cast<std::int64_t>(j) * bw) / size);
            if (!rec.mask[static_cast<std::size_t>(r) * W + c]) continue; // clean zero background
            for (int ch = 0; ch < 3; ++ch)
                px[(static_cast<std::size_t>(i) * size + j) * 3 + ch] =
                    v[static_cast<std::size_t>((static_cast<std::int64_t>(r) * W + c) * 3 + ch)];
        }
    }
    return Tensor<double>::from({size, size, 3}, std::move(px));
}

// Seeded shuffle of the kept records; the first test_count become the test
// split, the rest train. Records that were filtered out stay "none".
inline void split_manifest(std::vector<ClipRecord>& records, int test_count, std::uint64_t seed) {
    if (test_count < 0) fail(ErrorKind::contract, "test_count must be >= 0");
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < records.size(); ++i) {
        records[i].split = "none";
        if (records[i].verdict == Verdict::kept) kept.push_back(i);
    }
    if (static_cast<std::size_t>(test_count) > kept.size()) {
        fail(ErrorKind::split, "test_count = " + std::to_string(test_count) + " exceeds the " +
                                   std::to_string(kept.size()) + " kept records");
    }
    RngStream rng = RngStream(seed).split(fnv1a("split/shuffle"));
    for (std::size_t i = kept.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.uniform_index(i));
        std::swap(kept[i - 1], kept[j]);
    }
    for (std::size_t i = 0; i < kept.size(); ++i)
        records[kept[i]].split = i < static_cast<std::size_t>(test_count) ? "test" : "train";
}

// ---------------------------------------------------------------------------
// manifest format
// ---------------------------------------------------------------------------

inline constexpr const char* manifest_header = "promptvid-manifest v1";

// Row view without the pixel payload, as stored in the manifest.
struct ManifestRow {
    std::string clip_id;
    std::string caption;
    int k = 0, n = 0;
    std::string subject_class;
    double area_ratio = 0.0;
    Verdict verdict = Verdict::kept;
    std::string split = "none";
};

inline std::string manifest_to_string(const std::vector<ClipRecord>& records) {
    std::ostringstream os;
    os << manifest_header << '\n';
    char ratio[64];
    for (const auto& r : records) {
        std::snprintf(ratio, sizeof(ratio), "%.17g", r.area_ratio);
        os << r.clip_id << '\t' << r.caption << '\t' << r.k << '\t' << r.n << '\t' << r.subject_class
           << '\t' << ratio << '\t' << to_string(r.verdict) << '\t' << r.split << '\n';
    }
    return os.str();
}

inline std::uint64_t manifest_hash(const std::vector<ClipRecord>& records) {
    return fnv1a(manifest_to_string(records));
}

namespace datadetail {

inline void atomic_write_text(const std::string& path, const std::string& body) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) fail(ErrorKind::data, "cannot open '" + tmp + "' for writing");
        os << body;
        if (!os) fail(ErrorKind::data, "write to '" + tmp + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

} // namespace datadetail

inline void write_manifest(const std::string& path, const std::vector<ClipRecord>& records) {
    datadetail::atomic_write_text(path, manifest_to_string(records));
}

inline std::vector<ManifestRow> read_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::data, "cannot open manifest '" + path + "'");
    std::string line;
    if (!std::getline(is, line) || line != manifest_header) {
        fail(ErrorKind::version, "'" + path + "' does not start with '" + manifest_header + "'");
    }
    std::vector<ManifestRow> rows;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 8) {
            fail(ErrorKind::parse, path + ":" + std::to_string(lineno) + ": expected 8 fields, got " +
                                       std::to_string(fields.size()));
        }
        ManifestRow row;
        row.clip_id = fields[0];
        row.caption = fields[1];
        try {
            row.k = std::stoi(fields[2]);
            row.n = std::stoi(fields[3]);
            row.area_ratio = std::stod(fields[5]);
        } catch (const std::exception&) {
            fail(ErrorKind::parse, path + ":" + std::to_string(lineno) + ": malformed numeric field");
        }
        row.subject_class = fields[4];
        row.verdict = verdict_from_string(fields[6]);
        row.split = fields[7];
        if (row.split != "none" && row.split != "train" && row.split != "test") {
            fail(ErrorKind::parse, path + ":" + std::to_string(lineno) + ": unknown split '" +
                                       row.split + "'");
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// mask, clip, and pixmap files
// ---------------------------------------------------------------------------

inline constexpr char mask_magic[8] = {'P', 'V', 'M', 'A', 'S', 'K', '1', '\0'};

inline void write_mask(const std::string& path, int h, int w, const std::vector<std::uint8_t>& mask) {
    if (h < 1 || w < 1 || mask.size() != static_cast<std::size_t>(h) * w) {
        fail(ErrorKind::dimension, "mask data does not match extents " + std::to_string(h) + "x" +
                                       std::to_string(w));
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) fail(ErrorKind::data, "cannot open '" + tmp + "' for writing");
        detail::write_raw(os, mask_magic, 8);
        const std::uint32_t hh = static_cast<std::uint32_t>(h), ww = static_cast<std::uint32_t>(w);
        detail::write_raw(os, &hh, 4);
        detail::write_raw(os, &ww, 4);
        detail::write_raw(os, mask.data(), mask.size());
        if (!os) fail(ErrorKind::data, "write to '" + tmp + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

struct MaskFile {
    int h = 0, w = 0;
    std::vector<std::uint8_t> mask;
};

inline MaskFile read_mask(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::data, "cannot open mask '" + path + "'");
    char magic[8];
    detail::read_raw(is, magic, 8);
    if (std::memcmp(magic, mask_magic, 8) != 0) fail(ErrorKind::version, "'" + path + "' is not a mask file");
    std::uint32_t h, w;
    detail::read_raw(is, &h, 4);
    detail::read_raw(is, &w, 4);
    if (h == 0 || w == 0 || static_cast<std::uint64_t>(h) * w > (1ull << 28)) {
        fail(ErrorKind::data, "implausible mask extents in '" + path + "'");
    }
    MaskFile out;
    out.h = static_cast<int>(h);
    out.w = static_cast<int>(w);
    out.mask.resize(static_cast<std::size_t>(h) * w);
    detail::read_raw(is, out.mask.data(), out.mask.size());
    for (auto m : out.mask)
        if (m > 1) fail(ErrorKind::data, "mask byte outside {0,1} in '" + path + "'");
    return out;
}

inline void save_clip(const std::string& path, const Tensor<double>& video) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) fail(ErrorKind::data, "cannot open '" + tmp + "' for writing");
        write_tensor(os, video);
        if (!os) fail(ErrorKind::data, "write to '" + tmp + "' failed");
    }
    std::filesystem::rename(tmp, path);
}

inline Tensor<double> load_clip(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::data, "cannot open clip '" + path + "'");
    return read_tensor<double>(is);
}

// Binary portable pixmap; values clamped to [0, 1] then rounded to bytes.
inline void write_ppm(const std::string& path, int h, int w, const std::vector<double>& rgb) {
    if (h < 1 || w < 1 || rgb.size() != static_cast<std::size_t>(h) * w * 3) {
        fail(ErrorKind::dimension, "pixmap data does not match extents " + std::to_string(h) + "x" +
                                       std::to_string(w));
    }
    std::ostringstream os;
    os << "P6\n" << w << ' ' << h << "\n255\n";
    std::string body = os.str();
    body.reserve(body.size() + rgb.size());
    for (double v : rgb) {
        const long b = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
        body.push_back(static_cast<char>(static_cast<unsigned char>(b)));
    }
    datadetail::atomic_write_text(path, body);
}

// All frames of a [F, H, W, 3] video side by side in one pixmap.
inline void write_frame_grid(const std::string& path, const Tensor<double>& video) {
    if (video.rank() != 4 || video.extent(3) != 3) {
        fail(ErrorKind::dimension, "frame grid needs a [F,H,W,3] video, got " + to_string(video.shape()));
    }
    const int F = static_cast<int>(video.extent(0)), H = static_cast<int>(video.extent(1)),
              W = static_cast<int>(video.extent(2));
    std::vector<double> grid(static_cast<std::size_t>(H) * F * W * 3);
    const auto& v = video.values();
    for (int f = 0; f < F; ++f)
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W; ++c)
                for (int ch = 0; ch < 3; ++ch)
                    grid[(static_cast<std::size_t>(r) * F * W + static_cast<std::size_t>(f) * W + c) * 3 +
                         ch] = v[static_cast<std::size_t>(((f * H + r) * W + c) * 3 + ch)];
    write_ppm(path, H, F * W, grid);
}

} // namespace promptvid
