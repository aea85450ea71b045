#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tgfuse/imaging.hpp"
#include "tgfuse/vlf.hpp"

namespace tgfuse {

// Retryable failure from a caption/LLM service; the pipeline retries these
// with bounded exponential backoff before giving up.
struct ServiceError : std::runtime_error {
    explicit ServiceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DenseCaption {
    std::array<int, 4> box{};  // x, y, w, h
    std::string phrase;
};

// Semantic prompts for one image, coarse to fine. Fields are optional so
// ablation variants can mark stages as absent.
struct PromptBundle {
    std::optional<std::string> image_caption;
    std::optional<std::vector<DenseCaption>> dense_captions;
    std::optional<std::vector<std::string>> semantic_mask_summary;

    bool complete() const {
        return image_caption && dense_captions && semantic_mask_summary;
    }
};

class ServiceClients {
public:
    virtual ~ServiceClients() = default;
    virtual std::string caption(const Image& img) = 0;
    virtual std::vector<DenseCaption> dense_caption(const Image& img) = 0;
    virtual std::vector<std::string> mask_summary(const Image& img) = 0;
    // `img` is non-null only when the prompt stage is bypassed and the raw
    // image goes to the language model directly.
    virtual std::string paragraph(const std::string& prompt, const Image* img) = 0;
};

// Deterministic in-process mock; output depends only on (input bytes, seed).
class MockServiceClients : public ServiceClients {
public:
    explicit MockServiceClients(uint64_t seed = 0) : seed_(seed) {}

    std::string caption(const Image& img) override;
    std::vector<DenseCaption> dense_caption(const Image& img) override;
    std::vector<std::string> mask_summary(const Image& img) override;
    std::string paragraph(const std::string& prompt, const Image* img) override;

    int64_t calls(const std::string& stage) const {
        auto it = calls_.find(stage);
        return it == calls_.end() ? 0 : it->second;
    }

private:
    uint64_t seed_;
    std::map<std::string, int64_t> calls_;
};

// HTTP+JSON clients. POSTs to {caption_base}/caption, /dense_caption,
// /mask_summary and {llm_base}/paragraph with a base64 image or prompt text.
class HttpServiceClients : public ServiceClients {
public:
    HttpServiceClients(std::string caption_base_url, std::string llm_base_url,
                       std::string api_key = "", int timeout_seconds = 30);
    static HttpServiceClients from_env();

    std::string caption(const Image& img) override;
    std::vector<DenseCaption> dense_caption(const Image& img) override;
    std::vector<std::string> mask_summary(const Image& img) override;
    std::string paragraph(const std::string& prompt, const Image* img) override;

private:
    std::string post_json(const std::string& base, const std::string& route,
                          const std::string& body, const std::string& result_key);
    std::string caption_base_;
    std::string llm_base_;
    std::string api_key_;
    int timeout_seconds_;
};

// --- Description pipeline ---------------------------------------------------

enum class AblationVariant { Full, NoText, NoCaption, NoDcSm, NoSm, NoGpt };

std::string to_string(AblationVariant v);
AblationVariant variant_from_string(const std::string& s);

struct PipelineOptions {
    bool use_caption = true;
    bool use_dense_caption = true;
    bool use_mask_summary = true;
    bool use_llm = true;
    int attempts = 3;
    int backoff_base_ms = 100;  // doubled per retry
    int backoff_cap_ms = 2000;
    uint64_t seed = 0;
    int64_t embed_dim = 256;
    std::string prompt_template;  // empty -> built-in template
};

PipelineOptions options_for_variant(AblationVariant v, uint64_t seed, int64_t embed_dim = 256);

struct ImagePairInput {
    std::string pair_id;
    Image img1, img2;
    std::string image_ref_1;  // stored into the record for the trainer
    std::string image_ref_2;
};

// Fills in the prompt template from a bundle (exposed for tests/fixtures).
std::string compose_prompt(const PromptBundle& bundle, const std::string& tmpl);

// Runs caption -> dense caption -> mask summary -> paragraph per image,
// validates descriptions, writes embedding files under
// `manifest_dir`/embeddings/ and returns the finished record.
VlfRecord build_record(const ImagePairInput& pair, FusionTask task,
                       const std::string& source_dataset, ServiceClients& clients,
                       const PipelineOptions& opt, const std::string& manifest_dir);

// Serializes an image as binary PNM (the payload placed in base64 envelopes).
std::string encode_pnm_bytes(const Image& img);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

// Mock generators shared by MockServiceClients and the HTTP mock server, keyed
// by a content hash so both transports give byte-identical answers.
std::string mock_caption_text(uint64_t content_hash, uint64_t seed);
std::vector<DenseCaption> mock_dense_captions(uint64_t content_hash, uint64_t seed);
std::vector<std::string> mock_mask_summaries(uint64_t content_hash, uint64_t seed);
std::string mock_paragraph_text(uint64_t prompt_hash, uint64_t seed);

}  // namespace tgfuse
