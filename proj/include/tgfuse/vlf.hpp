#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tgfuse/errors.hpp"
#include "tgfuse/tensor.hpp"

namespace tgfuse {

enum class FusionTask { IVF, MIF, MEF, MFF };

std::string to_string(FusionTask t);
FusionTask task_from_string(const std::string& s);

// Token-embedding matrix for one description: L tokens by D dims.
struct TextFeature {
    Tensor matrix;  // (L, D)

    int64_t tokens() const { return matrix.shape.empty() ? 0 : matrix.shape[0]; }
    int64_t dim() const { return matrix.shape.size() < 2 ? 0 : matrix.shape[1]; }
    void check() const;
};

// Sequence concatenation: rows of `a` first, dims must agree.
TextFeature fuse_text_features(const TextFeature& a, const TextFeature& b);

// Deterministic hermetic stand-in for a frozen text encoder: one token per
// word, rows hashed from (word, position, seed) into N(0,1) then L2-normalized.
TextFeature stub_embed(const std::string& text, int64_t dim, uint64_t seed);

struct ValidationReport {
    int64_t sentence_count = 0;
    int64_t word_count = 0;
    bool passed = false;  // at least 7 sentences
};

ValidationReport validate_description(const std::string& text);

// --- Embedding file (binary, bit-exact layout) ---------------------------
// magic "VLFE" | version u16 LE | L u32 LE | D u32 LE | L*D float32 LE

void write_embedding(const std::string& path, const TextFeature& f);
TextFeature read_embedding(const std::string& path);

// --- VLF records and manifest --------------------------------------------

struct VlfRecord {
    std::string pair_id;
    FusionTask task = FusionTask::IVF;
    std::string source_dataset;
    std::string description_1;
    std::string description_2;
    std::string embedding_ref_1;  // relative to the manifest directory
    std::string embedding_ref_2;
    std::string image_ref_1;  // optional; used by the trainer
    std::string image_ref_2;
    bool validated_1 = false;
    bool validated_2 = false;

    std::string to_json_line() const;
    static VlfRecord from_json_line(const std::string& line);
};

inline constexpr const char* kManifestHeader = "vlf-manifest v1";

void write_manifest(const std::string& path, const std::vector<VlfRecord>& records);
std::vector<VlfRecord> read_manifest(const std::string& path);

struct CorpusStats {
    int64_t descriptions = 0;
    int64_t validated = 0;
    int64_t min_sentences = 0;
    double mean_sentences = 0.0;
    double mean_words = 0.0;
};

CorpusStats corpus_stats(const std::vector<VlfRecord>& records);

// Loads both embeddings of a record (paths resolved against manifest_dir) and
// checks the shared-dimension invariant.
std::pair<TextFeature, TextFeature> load_record_embeddings(const VlfRecord& rec,
                                                           const std::string& manifest_dir);

}  // namespace tgfuse
