#include "tgfuse/vlf.hpp"

#include <json.hpp>

#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tgfuse/rng.hpp"

namespace tgfuse {

using nlohmann::json;

std::string to_string(FusionTask t) {
    switch (t) {
        case FusionTask::IVF: return "ivf";
        case FusionTask::MIF: return "mif";
        case FusionTask::MEF: return "mef";
        case FusionTask::MFF: return "mff";
    }
    return "ivf";
}

FusionTask task_from_string(const std::string& s) {
    if (s == "ivf") return FusionTask::IVF;
    if (s == "mif") return FusionTask::MIF;
    if (s == "mef") return FusionTask::MEF;
    if (s == "mff") return FusionTask::MFF;
    throw FormatError("unknown fusion task '" + s + "'");
}

void TextFeature::check() const {
    require(matrix.rank() == 2, "text feature must be a 2-d matrix");
    require(tokens() >= 1, "text feature needs at least one token");
    require(dim() >= 1, "text feature needs a positive dim");
    require(matrix.all_finite(), "text feature rows must be finite");
}

TextFeature fuse_text_features(const TextFeature& a, const TextFeature& b) {
    a.check();
    b.check();
    require(a.dim() == b.dim(), "text feature dim mismatch");
    TextFeature out;
    out.matrix = Tensor({a.tokens() + b.tokens(), a.dim()});
    std::copy(a.matrix.data.begin(), a.matrix.data.end(), out.matrix.data.begin());
    std::copy(b.matrix.data.begin(), b.matrix.data.end(),
              out.matrix.data.begin() + a.matrix.numel());
    return out;
}

namespace {

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string w;
    while (in >> w) words.push_back(w);
    return words;
}

}  // namespace

TextFeature stub_embed(const std::string& text, int64_t dim, uint64_t seed) {
    require(dim >= 8, "stub_embed: dim must be at least 8");
    auto words = split_words(text);
    require(!words.empty(), "stub_embed: text has no words");
    TextFeature out;
    out.matrix = Tensor({static_cast<int64_t>(words.size()), dim});
    for (size_t i = 0; i < words.size(); ++i) {
        uint64_t h = fnv1a64(words[i]);
        h = fnv1a64(&i, sizeof(i), h);
        h ^= seed * 0x9e3779b97f4a7c15ULL;
        uint64_t state = h;
        double norm2 = 0.0;
        std::vector<double> row(static_cast<size_t>(dim));
        for (int64_t d = 0; d < dim; d += 2) {
            // Box-Muller on splitmix64 output.
            double u1 =
                (static_cast<double>(splitmix64(state) >> 11) + 0.5) * (1.0 / 9007199254740992.0);
            double u2 =
                (static_cast<double>(splitmix64(state) >> 11) + 0.5) * (1.0 / 9007199254740992.0);
            double r = std::sqrt(-2.0 * std::log(u1));
            row[static_cast<size_t>(d)] = r * std::cos(2.0 * M_PI * u2);
            if (d + 1 < dim) row[static_cast<size_t>(d + 1)] = r * std::sin(2.0 * M_PI * u2);
        }
        for (int64_t d = 0; d < dim; ++d) norm2 += row[static_cast<size_t>(d)] * row[static_cast<size_t>(d)];
        double inv = 1.0 / std::sqrt(norm2);
        for (int64_t d = 0; d < dim; ++d)
            out.matrix.at2(static_cast<int64_t>(i), d) =
                static_cast<float>(row[static_cast<size_t>(d)] * inv);
    }
    return out;
}

ValidationReport validate_description(const std::string& text) {
    bool has_content = false;
    for (char c : text)
        if (!std::isspace(static_cast<unsigned char>(c))) has_content = true;
    if (!has_content) throw ValidationError("empty description");

    ValidationReport rep;
    rep.word_count = static_cast<int64_t>(split_words(text).size());

    // A sentence ends at one or more of ./!/? followed by whitespace or EOF.
    bool in_sentence = false;
    size_t i = 0;
    auto is_term = [](char c) { return c == '.' || c == '!' || c == '?'; };
    while (i < text.size()) {
        char c = text[i];
        if (is_term(c)) {
            size_t j = i;
            while (j < text.size() && is_term(text[j])) ++j;
            if ((j == text.size() || std::isspace(static_cast<unsigned char>(text[j]))) &&
                in_sentence) {
                ++rep.sentence_count;
                in_sentence = false;
            }
            i = j;
        } else {
            if (!std::isspace(static_cast<unsigned char>(c))) in_sentence = true;
            ++i;
        }
    }
    if (in_sentence) ++rep.sentence_count;  // trailing text without a terminator
    rep.passed = rep.sentence_count >= 7;
    return rep;
}

// --- Embedding file -------------------------------------------------------

namespace {

constexpr char kEmbeddingMagic[4] = {'V', 'L', 'F', 'E'};
constexpr uint16_t kEmbeddingVersion = 1;

template <typename T>
void write_le(std::ostream& out, T v) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (in.gcount() != sizeof(T)) throw FormatError("truncated embedding file");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void write_embedding(const std::string& path, const TextFeature& f) {
    f.check();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NotFoundError(path + ": cannot open for writing");
    out.write(kEmbeddingMagic, 4);
    write_le<uint16_t>(out, kEmbeddingVersion);
    write_le<uint32_t>(out, static_cast<uint32_t>(f.tokens()));
    write_le<uint32_t>(out, static_cast<uint32_t>(f.dim()));
    for (float v : f.matrix.data) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        write_le<uint32_t>(out, bits);
    }
}

TextFeature read_embedding(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError(path + ": no such file");
    char magic[4];
    in.read(magic, 4);
    if (in.gcount() != 4 || std::memcmp(magic, kEmbeddingMagic, 4) != 0)
        throw FormatError(path + ": bad embedding magic");
    uint16_t version = read_le<uint16_t>(in);
    if (version != kEmbeddingVersion)
        throw FormatError(path + ": unsupported embedding version " + std::to_string(version));
    uint32_t L = read_le<uint32_t>(in);
    uint32_t D = read_le<uint32_t>(in);
    TextFeature f;
    f.matrix = Tensor({static_cast<int64_t>(L), static_cast<int64_t>(D)});
    for (auto& v : f.matrix.data) {
        uint32_t bits = read_le<uint32_t>(in);
        std::memcpy(&v, &bits, 4);
    }
    // The payload must be exactly L*D*4 bytes.
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0)
        throw FormatError(path + ": trailing bytes after embedding payload");
    f.check();
    return f;
}

// --- Records and manifest ---------------------------------------------------

std::string VlfRecord::to_json_line() const {
    json j;
    j["pair_id"] = pair_id;
    j["task"] = to_string(task);
    j["source_dataset"] = source_dataset;
    j["description_1"] = description_1;
    j["description_2"] = description_2;
    j["embedding_ref_1"] = embedding_ref_1;
    j["embedding_ref_2"] = embedding_ref_2;
    if (!image_ref_1.empty()) j["image_ref_1"] = image_ref_1;
    if (!image_ref_2.empty()) j["image_ref_2"] = image_ref_2;
    j["validated_1"] = validated_1;
    j["validated_2"] = validated_2;
    return j.dump();
}

VlfRecord VlfRecord::from_json_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("bad manifest record: ") + e.what());
    }
    VlfRecord r;
    try {
        r.pair_id = j.at("pair_id").get<std::string>();
        r.task = task_from_string(j.at("task").get<std::string>());
        r.source_dataset = j.value("source_dataset", "");
        r.description_1 = j.at("description_1").get<std::string>();
        r.description_2 = j.at("description_2").get<std::string>();
        r.embedding_ref_1 = j.value("embedding_ref_1", "");
        r.embedding_ref_2 = j.value("embedding_ref_2", "");
        r.image_ref_1 = j.value("image_ref_1", "");
        r.image_ref_2 = j.value("image_ref_2", "");
        r.validated_1 = j.value("validated_1", false);
        r.validated_2 = j.value("validated_2", false);
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad manifest record: ") + e.what());
    }
    return r;
}

void write_manifest(const std::string& path, const std::vector<VlfRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NotFoundError(path + ": cannot open for writing");
    out << kManifestHeader << "\n";
    for (const auto& r : records) out << r.to_json_line() << "\n";
}

std::vector<VlfRecord> read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError(path + ": no such file");
    std::string line;
    if (!std::getline(in, line) || line != kManifestHeader)
        throw FormatError(path + ": missing 'vlf-manifest v1' header");
    std::vector<VlfRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        records.push_back(VlfRecord::from_json_line(line));
    }
    return records;
}

CorpusStats corpus_stats(const std::vector<VlfRecord>& records) {
    CorpusStats st;
    int64_t sentence_sum = 0, word_sum = 0;
    st.min_sentences = 0;
    bool first = true;
    for (const auto& r : records) {
        for (const std::string* d : {&r.description_1, &r.description_2}) {
            auto rep = validate_description(*d);
            ++st.descriptions;
            if (rep.passed) ++st.validated;
            sentence_sum += rep.sentence_count;
            word_sum += rep.word_count;
            if (first || rep.sentence_count < st.min_sentences) st.min_sentences = rep.sentence_count;
            first = false;
        }
    }
    if (st.descriptions > 0) {
        st.mean_sentences = static_cast<double>(sentence_sum) / static_cast<double>(st.descriptions);
        st.mean_words = static_cast<double>(word_sum) / static_cast<double>(st.descriptions);
    }
    return st;
}

std::pair<TextFeature, TextFeature> load_record_embeddings(const VlfRecord& rec,
                                                           const std::string& manifest_dir) {
    namespace fs = std::filesystem;
    auto resolve = [&](const std::string& ref) {
        fs::path p(ref);
        if (p.is_absolute()) return p.string();
        return (fs::path(manifest_dir) / p).string();
    };
    TextFeature a = read_embedding(resolve(rec.embedding_ref_1));
    TextFeature b = read_embedding(resolve(rec.embedding_ref_2));
    require(a.dim() == b.dim(), "record embeddings disagree on dimension");
    return {a, b};
}

}  // namespace tgfuse
