#pragma once

// Text/image conditioning: frozen toy encoders, the trainable MLP mapper into
// text-embedding space, and the fusion that splices the mapped image vector
// into the caption embedding sequence in place of the subject span.
//
// The "encoders" are frozen random projections derived from a seed. They are
// NOT semantically meaningful; they exist so that conditioning, training, and
// evaluation share one fixed feature space with real interface contracts.

#include <cctype>
#include <cstdint>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "promptvid/detmath.hpp"
#include "promptvid/errors.hpp"
#include "promptvid/param_store.hpp"
#include "promptvid/rng.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

struct EncoderConfig {
    int vocab_size = 0;            // set from the vocabulary
    int d_txt = 16;                // text embedding width
    int image_patch = 8;           // pooled grid resolution per side
    int d_img = 12;                // coarse image feature width
    std::vector<int> mapper_hidden_widths; // empty = two hidden layers of 4*d_txt
    std::uint64_t frozen_seed = 1234;
    int max_tokens = 32;

    std::vector<int> resolved_mapper_widths() const {
        if (!mapper_hidden_widths.empty()) return mapper_hidden_widths;
        return {4 * d_txt, 4 * d_txt};
    }

    void validate() const {
        if (vocab_size < 1) fail(ErrorKind::config, "vocab_size must be >= 1");
        if (d_txt < 2 || d_txt % 2 != 0) fail(ErrorKind::config, "d_txt must be even and >= 2");
        if (image_patch < 1) fail(ErrorKind::config, "image_patch must be >= 1");
        if (d_img < 1) fail(ErrorKind::config, "d_img must be >= 1");
        if (max_tokens < 1) fail(ErrorKind::config, "max_tokens must be >= 1");
        for (int w : resolved_mapper_widths())
            if (w < 1) fail(ErrorKind::config, "mapper hidden widths must be >= 1");
    }
};

// Fixed-length token sequence. pad_mask[i] is true where position i is
// padding; pad positions always carry the reserved null token (id 0).
struct TextTokenSeq {
    std::vector<int> token_ids;
    std::vector<std::uint8_t> pad_mask;

    int length() const {
        int n = 0;
        for (auto p : pad_mask)
            if (!p) ++n;
        return n;
    }
};

template <class T>
struct ComposedCondition {
    Tensor<T> embeddings; // [max_tokens, d_txt]
    int image_slot = -1;  // index where the mapped image vector sits
    std::vector<std::uint8_t> pad_mask;
};

// Line-delimited token list; token id = line number. Line 0 must be the
// reserved null/padding token.
class Vocabulary {
public:
    static constexpr int null_id = 0;

    static Vocabulary from_tokens(std::vector<std::string> tokens) {
        if (tokens.empty()) fail(ErrorKind::vocabulary, "vocabulary must contain the null token");
        Vocabulary v;
        v.tokens_ = std::move(tokens);
        for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
            if (v.tokens_[i].empty()) fail(ErrorKind::vocabulary, "empty vocabulary entry at line " + std::to_string(i));
            if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second)
                fail(ErrorKind::vocabulary, "duplicate vocabulary entry '" + v.tokens_[i] + "'");
        }
        return v;
    }

    static Vocabulary load(std::istream& is) {
        std::vector<std::string> tokens;
        std::string line;
        while (std::getline(is, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            tokens.push_back(line);
        }
        return from_tokens(std::move(tokens));
    }

    void save(std::ostream& os) const {
        for (const auto& t : tokens_) os << t << '\n';
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    bool contains(const std::string& w) const { return index_.count(w) != 0; }

    int id(const std::string& w) const {
        auto it = index_.find(w);
        if (it == index_.end()) fail(ErrorKind::vocabulary, "word '" + w + "' is not in the vocabulary");
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) fail(ErrorKind::vocabulary, "token id " + std::to_string(id) + " out of range");
        return tokens_[static_cast<std::size_t>(id)];
    }

    static std::vector<std::string> split_words(const std::string& caption) {
        std::vector<std::string> words;
        std::string cur;
        for (char c : caption) {
            if (std::isspace(static_cast<unsigned char>(c))) {
                if (!cur.empty()) words.push_back(std::move(cur));
                cur.clear();
            } else {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            }
        }
        if (!cur.empty()) words.push_back(std::move(cur));
        return words;
    }

    TextTokenSeq encode(const std::string& caption, int max_tokens) const {
        const auto words = split_words(caption);
        if (static_cast<int>(words.size()) > max_tokens) {
            fail(ErrorKind::contract, "caption has " + std::to_string(words.size()) +
                                          " words, more than max_tokens = " + std::to_string(max_tokens));
        }
        TextTokenSeq seq;
        seq.token_ids.assign(static_cast<std::size_t>(max_tokens), null_id);
        seq.pad_mask.assign(static_cast<std::size_t>(max_tokens), 1);
        for (std::size_t i = 0; i < words.size(); ++i) {
            seq.token_ids[i] = id(words[i]);
            seq.pad_mask[i] = 0;
        }
        return seq;
    }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

template <class T>
class Conditioning {
public:
    explicit Conditioning(EncoderConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        RngStream root(cfg_.frozen_seed);
        {
            RngStream s = root.split(fnv1a("frozen/token_table"));
            table_ = Tensor<T>::randn({cfg_.vocab_size, cfg_.d_txt}, s,
                                      1.0 / std::sqrt(static_cast<double>(cfg_.d_txt)));
        }
        positions_ = build_positions(cfg_.max_tokens, cfg_.d_txt);
        const int in_width = cfg_.image_patch * cfg_.image_patch * 3;
        {
            RngStream s = root.split(fnv1a("frozen/image_projection_w"));
            img_w_ = Tensor<T>::randn({in_width, cfg_.d_img}, s,
                                      1.0 / std::sqrt(static_cast<double>(in_width)));
        }
        {
            RngStream s = root.split(fnv1a("frozen/image_projection_b"));
            img_b_ = Tensor<T>::randn({cfg_.d_img}, s, 0.1);
        }
    }

    const EncoderConfig& config() const { return cfg_; }
    const Tensor<T>& token_table() const { return table_; }
    const Tensor<T>& position_table() const { return positions_; }
    const Tensor<T>& image_projection_weight() const { return img_w_; }
    const Tensor<T>& image_projection_bias() const { return img_b_; }

    // Frozen lookup: row p = table[token_ids[p]] + positions[p]. Returns a
    // leaf; text embeddings are never trained.
    Tensor<T> encode_text(const TextTokenSeq& tokens) const {
        if (static_cast<int>(tokens.token_ids.size()) != cfg_.max_tokens ||
            tokens.pad_mask.size() != tokens.token_ids.size()) {
            fail(ErrorKind::contract, "token sequence must have exactly max_tokens entries");
        }
        std::vector<T> out(static_cast<std::size_t>(cfg_.max_tokens * cfg_.d_txt));
        for (int p = 0; p < cfg_.max_tokens; ++p) {
            const int id = tokens.token_ids[static_cast<std::size_t>(p)];
            if (id < 0 || id >= cfg_.vocab_size) {
                fail(ErrorKind::vocabulary, "token id " + std::to_string(id) + " outside vocabulary of size " +
                                                std::to_string(cfg_.vocab_size));
            }
            if (tokens.pad_mask[static_cast<std::size_t>(p)] && id != Vocabulary::null_id) {
                fail(ErrorKind::contract, "pad position " + std::to_string(p) + " carries a non-null token");
            }
            for (int j = 0; j < cfg_.d_txt; ++j) {
                out[static_cast<std::size_t>(p * cfg_.d_txt + j)] =
                    table_.values()[static_cast<std::size_t>(id * cfg_.d_txt + j)] +
                    positions_.values()[static_cast<std::size_t>(p * cfg_.d_txt + j)];
            }
        }
        return Tensor<T>::from({cfg_.max_tokens, cfg_.d_txt}, std::move(out));
    }

    // Frozen coarse image feature: adaptive patch-average to a fixed
    // image_patch x image_patch grid per channel, then a fixed linear map.
    Tensor<T> encode_image_coarse(const Tensor<T>& image_hwc) const {
        if (image_hwc.rank() != 3 || image_hwc.extent(2) != 3 || image_hwc.extent(0) < 1 ||
            image_hwc.extent(1) < 1) {
            fail(ErrorKind::dimension, "prompt image must be [H,W,3] with positive extents, got " +
                                           to_string(image_hwc.shape()));
        }
        const std::int64_t H = image_hwc.extent(0), W = image_hwc.extent(1);
        const int g = cfg_.image_patch;
        std::vector<T> pooled(static_cast<std::size_t>(g * g * 3), T(0));
        const auto& img = image_hwc.values();
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
                            acc += static_cast<double>(img[static_cast<std::size_t>((r * W + c) * 3 + ch)]);
                    pooled[static_cast<std::size_t>((gi * g + gj) * 3 + ch)] =
                        static_cast<T>(acc / static_cast<double>((r1 - r0) * (c1 - c0)));
                }
            }
        }
        auto x = Tensor<T>::from({1, g * g * 3}, std::move(pooled));
        auto f = add_bias_lastdim(matmul(x, img_w_), img_b_);
        return reshape(f, {cfg_.d_img}).detach();
    }

    // Parameter names and stage tags for the trainable mapper.
    std::vector<std::string> mapper_param_names() const {
        std::vector<std::string> names;
        const auto widths = layer_widths();
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            names.push_back("mapper/l" + std::to_string(l) + "/w");
            names.push_back("mapper/l" + std::to_string(l) + "/b");
        }
        return names;
    }

    void create_mapper_params(ParameterStore<T>& store, const RngStream& init_root) const {
        const auto widths = layer_widths();
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const std::string base = "mapper/l" + std::to_string(l) + "/";
            const bool last = (l + 2 == widths.size());
            if (last) {
                // zero-init final layer: training starts from f_I = bias = 0
                store.create_zeros(base + "w", {widths[l], widths[l + 1]}, StageTag::stage1);
                store.create_zeros(base + "b", {widths[l + 1]}, StageTag::stage1);
            } else {
                store.create_normal(base + "w", {widths[l], widths[l + 1]}, init_root,
                                    1.0 / std::sqrt(static_cast<double>(widths[l])), StageTag::stage1);
                store.create_zeros(base + "b", {widths[l + 1]}, StageTag::stage1);
            }
        }
    }

    // f_I = mapper(f_V); differentiable into the mapper parameters.
    Tensor<T> map_to_text_space(const ParameterStore<T>& store, const Tensor<T>& f_v) const {
        if (f_v.rank() != 1 || f_v.extent(0) != cfg_.d_img) {
            fail(ErrorKind::dimension, "coarse image feature must be [" + std::to_string(cfg_.d_img) +
                                           "], got " + to_string(f_v.shape()));
        }
        const auto widths = layer_widths();
        Tensor<T> x = reshape(f_v, {1, cfg_.d_img});
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const std::string base = "mapper/l" + std::to_string(l) + "/";
            x = add_bias_lastdim(matmul(x, store.get(base + "w")), store.get(base + "b"));
            if (l + 2 < widths.size()) x = silu(x);
        }
        return reshape(x, {cfg_.d_txt});
    }

    // c_T = [f_T[0..k), f_I, f_T[k+n..L)], re-padded to max_tokens with the
    // frozen null-token embedding at each pad position.
    ComposedCondition<T> fuse(const Tensor<T>& f_t, const TextTokenSeq& tokens, const Tensor<T>& f_i,
                              int k, int n) const {
        if (f_t.rank() != 2 || f_t.extent(0) != cfg_.max_tokens || f_t.extent(1) != cfg_.d_txt) {
            fail(ErrorKind::dimension, "encoded text must be [max_tokens, d_txt], got " + to_string(f_t.shape()));
        }
        if (f_i.rank() != 1 || f_i.extent(0) != cfg_.d_txt) {
            fail(ErrorKind::dimension, "mapped image vector must be [d_txt], got " + to_string(f_i.shape()));
        }
        const int L = tokens.length();
        if (n == 0) fail(ErrorKind::contract, "subject span length must be >= 1");
        if (k < 0 || n < 0 || k + n > L) {
            fail(ErrorKind::span, "span [" + std::to_string(k) + "," + std::to_string(k + n) +
                                      ") outside caption of length " + std::to_string(L));
        }
        const int fused_len = L - n + 1;
        std::vector<Tensor<T>> parts;
        if (k > 0) parts.push_back(slice(f_t, 0, 0, k));
        parts.push_back(reshape(f_i, {1, cfg_.d_txt}));
        if (k + n < L) parts.push_back(slice(f_t, 0, k + n, L - (k + n)));
        if (fused_len < cfg_.max_tokens) parts.push_back(pad_rows(fused_len, cfg_.max_tokens));

        ComposedCondition<T> out;
        out.embeddings = concat(parts, 0);
        out.image_slot = k;
        out.pad_mask.assign(static_cast<std::size_t>(cfg_.max_tokens), 1);
        for (int p = 0; p < fused_len; ++p) out.pad_mask[static_cast<std::size_t>(p)] = 0;
        return out;
    }

    // Condition for text-only use: encoded caption, no image slot.
    ComposedCondition<T> text_only(const TextTokenSeq& tokens) const {
        ComposedCondition<T> out;
        out.embeddings = encode_text(tokens);
        out.image_slot = -1;
        out.pad_mask = tokens.pad_mask;
        return out;
    }

private:
    std::vector<std::int64_t> layer_widths() const {
        std::vector<std::int64_t> widths{cfg_.d_img};
        for (int w : cfg_.resolved_mapper_widths()) widths.push_back(w);
        widths.push_back(cfg_.d_txt);
        return widths;
    }

    Tensor<T> pad_rows(int from, int to) const {
        std::vector<T> rows(static_cast<std::size_t>((to - from) * cfg_.d_txt));
        for (int p = from; p < to; ++p)
            for (int j = 0; j < cfg_.d_txt; ++j)
                rows[static_cast<std::size_t>((p - from) * cfg_.d_txt + j)] =
                    table_.values()[static_cast<std::size_t>(Vocabulary::null_id * cfg_.d_txt + j)] +
                    positions_.values()[static_cast<std::size_t>(p * cfg_.d_txt + j)];
        return Tensor<T>::from({to - from, cfg_.d_txt}, std::move(rows));
    }

    static Tensor<T> build_positions(int max_tokens, int d_txt) {
        std::vector<T> pos(static_cast<std::size_t>(max_tokens * d_txt));
        for (int p = 0; p < max_tokens; ++p)
            for (int i = 0; i < d_txt / 2; ++i) {
                const double rate = detmath::det_exp(-detmath::det_log(10000.0) *
                                                     (2.0 * i / static_cast<double>(d_txt)));
                pos[static_cast<std::size_t>(p * d_txt + 2 * i)] = static_cast<T>(detmath::det_sin(p * rate));
                pos[static_cast<std::size_t>(p * d_txt + 2 * i + 1)] = static_cast<T>(detmath::det_cos(p * rate));
            }
        return Tensor<T>::from({max_tokens, d_txt}, std::move(pos));
    }

    EncoderConfig cfg_;
    Tensor<T> table_;     // [vocab, d_txt], frozen
    Tensor<T> positions_; // [max_tokens, d_txt], fixed
    Tensor<T> img_w_;     // [g*g*3, d_img], frozen
    Tensor<T> img_b_;     // [d_img], frozen
};

} // namespace promptvid
