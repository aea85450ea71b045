#include "tgfuse/services.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <thread>

#include "tgfuse/rng.hpp"

namespace tgfuse {

using nlohmann::json;

std::string to_string(AblationVariant v) {
    switch (v) {
        case AblationVariant::Full: return "full";
        case AblationVariant::NoText: return "no_text";
        case AblationVariant::NoCaption: return "no_caption";
        case AblationVariant::NoDcSm: return "no_dc_sm";
        case AblationVariant::NoSm: return "no_sm";
        case AblationVariant::NoGpt: return "no_gpt";
    }
    return "full";
}

AblationVariant variant_from_string(const std::string& s) {
    if (s == "full") return AblationVariant::Full;
    if (s == "no_text") return AblationVariant::NoText;
    if (s == "no_caption") return AblationVariant::NoCaption;
    if (s == "no_dc_sm") return AblationVariant::NoDcSm;
    if (s == "no_sm") return AblationVariant::NoSm;
    if (s == "no_gpt") return AblationVariant::NoGpt;
    throw FormatError("unknown ablation variant '" + s + "'");
}

PipelineOptions options_for_variant(AblationVariant v, uint64_t seed, int64_t embed_dim) {
    PipelineOptions opt;
    opt.seed = seed;
    opt.embed_dim = embed_dim;
    switch (v) {
        case AblationVariant::Full:
        case AblationVariant::NoText:  // text unused downstream; keep the full pipeline shape
            break;
        case AblationVariant::NoCaption:
            opt.use_caption = opt.use_dense_caption = opt.use_mask_summary = false;
            break;
        case AblationVariant::NoDcSm:
            opt.use_dense_caption = opt.use_mask_summary = false;
            break;
        case AblationVariant::NoSm:
            opt.use_mask_summary = false;
            break;
        case AblationVariant::NoGpt:
            opt.use_llm = false;
            break;
    }
    return opt;
}

// --- base64 -----------------------------------------------------------------

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::string& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    while (i + 2 < bytes.size()) {
        uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                     (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                     static_cast<unsigned char>(bytes[i + 2]);
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += kB64[(v >> 6) & 63];
        out += kB64[v & 63];
        i += 3;
    }
    if (i + 1 == bytes.size()) {
        uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == bytes.size()) {
        uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                     (static_cast<unsigned char>(bytes[i + 1]) << 8);
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += kB64[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::string base64_decode(const std::string& text) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::string out;
    uint32_t acc = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=' || std::isspace(static_cast<unsigned char>(c))) continue;
        int v = val(c);
        if (v < 0) throw FormatError("invalid base64");
        acc = (acc << 6) | static_cast<uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out += static_cast<char>((acc >> bits) & 0xff);
        }
    }
    return out;
}

std::string encode_pnm_bytes(const Image& img) {
    std::ostringstream out;
    out << (img.channels == 1 ? "P5" : "P6") << "\n"
        << img.width << " " << img.height << "\n255\n";
    for (int64_t y = 0; y < img.height; ++y)
        for (int64_t x = 0; x < img.width; ++x)
            for (int64_t c = 0; c < img.channels; ++c) {
                double q = std::nearbyint(static_cast<double>(img.at(c, y, x)) * 255.0);
                out.put(static_cast<char>(static_cast<int>(std::clamp(q, 0.0, 255.0))));
            }
    return out.str();
}

// --- Mock generators ----------------------------------------------------------

namespace {

const char* kSubjects[] = {"road", "courtyard", "building", "pedestrian", "vehicle",
                           "tree line", "bridge", "footpath", "storefront", "hillside"};
const char* kAdjectives[] = {"dim", "bright", "cluttered", "sparse", "foggy",
                             "sunlit", "shadowed", "busy", "quiet", "distant"};
const char* kDetails[] = {"near the left edge", "at the center",      "toward the horizon",
                          "in the foreground",  "along the top edge", "by the right margin"};

std::string pick(const char* const* bank, size_t n, uint64_t& state) {
    return bank[splitmix64(state) % n];
}

}  // namespace

std::string mock_caption_text(uint64_t content_hash, uint64_t seed) {
    uint64_t state = content_hash ^ (seed * 0x9e3779b97f4a7c15ULL) ^ 0xc0ffee;
    std::ostringstream os;
    os << "a " << pick(kAdjectives, 10, state) << " " << pick(kSubjects, 10, state) << " with a "
       << pick(kAdjectives, 10, state) << " " << pick(kSubjects, 10, state);
    return os.str();
}

std::vector<DenseCaption> mock_dense_captions(uint64_t content_hash, uint64_t seed) {
    uint64_t state = content_hash ^ (seed * 0x9e3779b97f4a7c15ULL) ^ 0xdc;
    size_t n = 2 + splitmix64(state) % 3;
    std::vector<DenseCaption> out;
    for (size_t i = 0; i < n; ++i) {
        DenseCaption dc;
        dc.box = {static_cast<int>(splitmix64(state) % 200), static_cast<int>(splitmix64(state) % 200),
                  static_cast<int>(1 + splitmix64(state) % 100),
                  static_cast<int>(1 + splitmix64(state) % 100)};
        dc.phrase = "a " + pick(kAdjectives, 10, state) + " " + pick(kSubjects, 10, state) + " " +
                    pick(kDetails, 6, state);
        out.push_back(dc);
    }
    return out;
}

std::vector<std::string> mock_mask_summaries(uint64_t content_hash, uint64_t seed) {
    uint64_t state = content_hash ^ (seed * 0x9e3779b97f4a7c15ULL) ^ 0x5a;
    size_t n = 2 + splitmix64(state) % 3;
    std::vector<std::string> out;
    for (size_t i = 0; i < n; ++i) {
        std::ostringstream os;
        os << "region " << (i + 1) << ": " << pick(kSubjects, 10, state) << " ("
           << (5 + splitmix64(state) % 60) << "% of frame)";
        out.push_back(os.str());
    }
    return out;
}

std::string mock_paragraph_text(uint64_t prompt_hash, uint64_t seed) {
    uint64_t state = prompt_hash ^ (seed * 0x9e3779b97f4a7c15ULL) ^ 0x6707;
    std::ostringstream os;
    size_t sentences = 8 + splitmix64(state) % 3;
    for (size_t s = 0; s < sentences; ++s) {
        os << "The " << pick(kAdjectives, 10, state) << " " << pick(kSubjects, 10, state) << " "
           << pick(kDetails, 6, state) << " stands out against the "
           << pick(kAdjectives, 10, state) << " " << pick(kSubjects, 10, state)
           << ", and its outline remains " << pick(kAdjectives, 10, state)
           << " under the prevailing light. ";
    }
    std::string text = os.str();
    if (!text.empty() && text.back() == ' ') text.pop_back();
    return text;
}

// --- MockServiceClients --------------------------------------------------------

namespace {
uint64_t image_hash(const Image& img) { return fnv1a64(encode_pnm_bytes(img)); }
}  // namespace

std::string MockServiceClients::caption(const Image& img) {
    ++calls_["caption"];
    return mock_caption_text(image_hash(img), seed_);
}

std::vector<DenseCaption> MockServiceClients::dense_caption(const Image& img) {
    ++calls_["dense_caption"];
    return mock_dense_captions(image_hash(img), seed_);
}

std::vector<std::string> MockServiceClients::mask_summary(const Image& img) {
    ++calls_["mask_summary"];
    return mock_mask_summaries(image_hash(img), seed_);
}

std::string MockServiceClients::paragraph(const std::string& prompt, const Image* img) {
    ++calls_["paragraph"];
    uint64_t h = fnv1a64(prompt);
    if (img) h ^= image_hash(*img);
    return mock_paragraph_text(h, seed_);
}

// --- HttpServiceClients ----------------------------------------------------------

HttpServiceClients::HttpServiceClients(std::string caption_base_url, std::string llm_base_url,
                                       std::string api_key, int timeout_seconds)
    : caption_base_(std::move(caption_base_url)),
      llm_base_(std::move(llm_base_url)),
      api_key_(std::move(api_key)),
      timeout_seconds_(timeout_seconds) {}

HttpServiceClients HttpServiceClients::from_env() {
    const char* cap = std::getenv("VLF_CAPTION_URL");
    const char* llm = std::getenv("VLF_LLM_URL");
    const char* key = std::getenv("VLF_API_KEY");
    if (!cap || !llm)
        throw NotFoundError("VLF_CAPTION_URL and VLF_LLM_URL must be set for http clients");
    return HttpServiceClients(cap, llm, key ? key : "");
}

std::string HttpServiceClients::post_json(const std::string& base, const std::string& route,
                                          const std::string& body, const std::string& result_key) {
    httplib::Client cli(base);
    cli.set_connection_timeout(timeout_seconds_, 0);
    cli.set_read_timeout(timeout_seconds_, 0);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    auto res = cli.Post(route, headers, body, "application/json");
    if (!res) throw ServiceError(route + ": " + httplib::to_string(res.error()));
    if (res->status != 200)
        throw ServiceError(route + ": HTTP " + std::to_string(res->status));
    try {
        json j = json::parse(res->body);
        return j.at(result_key).dump();
    } catch (const json::exception& e) {
        throw ServiceError(route + ": bad response body: " + e.what());
    }
}

std::string HttpServiceClients::caption(const Image& img) {
    json req;
    req["image_b64"] = base64_encode(encode_pnm_bytes(img));
    std::string raw = post_json(caption_base_, "/caption", req.dump(), "caption");
    return json::parse(raw).get<std::string>();
}

std::vector<DenseCaption> HttpServiceClients::dense_caption(const Image& img) {
    json req;
    req["image_b64"] = base64_encode(encode_pnm_bytes(img));
    std::string raw = post_json(caption_base_, "/dense_caption", req.dump(), "captions");
    std::vector<DenseCaption> out;
    for (const auto& item : json::parse(raw)) {
        DenseCaption dc;
        auto box = item.at("box");
        for (int i = 0; i < 4; ++i) dc.box[static_cast<size_t>(i)] = box.at(i).get<int>();
        dc.phrase = item.at("phrase").get<std::string>();
        out.push_back(dc);
    }
    return out;
}

std::vector<std::string> HttpServiceClients::mask_summary(const Image& img) {
    json req;
    req["image_b64"] = base64_encode(encode_pnm_bytes(img));
    std::string raw = post_json(caption_base_, "/mask_summary", req.dump(), "regions");
    std::vector<std::string> out;
    for (const auto& item : json::parse(raw)) out.push_back(item.get<std::string>());
    return out;
}

std::string HttpServiceClients::paragraph(const std::string& prompt, const Image* img) {
    json req;
    req["prompt"] = prompt;
    if (img) req["image_b64"] = base64_encode(encode_pnm_bytes(*img));
    std::string raw = post_json(llm_base_, "/paragraph", req.dump(), "paragraph");
    return json::parse(raw).get<std::string>();
}

// --- Pipeline ---------------------------------------------------------------

namespace {

constexpr const char* kDefaultPromptTemplate =
    "Write a detailed paragraph of at least seven sentences describing this scene, "
    "covering every listed element and how they relate.\n"
    "{caption}{dense_captions}{mask_summary}";

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

template <typename Fn>
auto with_retries(const std::string& stage, const PipelineOptions& opt, Fn&& fn) {
    int attempt = 0;
    for (;;) {
        try {
            return fn();
        } catch (const ServiceError& e) {
            ++attempt;
            if (attempt >= opt.attempts) throw PipelineError(stage, e.what());
            int delay = opt.backoff_base_ms << (attempt - 1);
            delay = std::min(delay, opt.backoff_cap_ms);
            std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        }
    }
}

std::string dense_caption_lines(const std::vector<DenseCaption>& dcs) {
    std::ostringstream os;
    for (const auto& dc : dcs)
        os << dc.phrase << " [" << dc.box[0] << "," << dc.box[1] << "," << dc.box[2] << ","
           << dc.box[3] << "]\n";
    return os.str();
}

std::string mask_summary_lines(const std::vector<std::string>& regions) {
    std::ostringstream os;
    for (const auto& r : regions) os << r << "\n";
    return os.str();
}

}  // namespace

std::string compose_prompt(const PromptBundle& bundle, const std::string& tmpl) {
    std::string t = tmpl.empty() ? kDefaultPromptTemplate : tmpl;
    t = replace_all(t, "{caption}",
                    bundle.image_caption ? "Image caption: " + *bundle.image_caption + "\n" : "");
    t = replace_all(t, "{dense_captions}",
                    bundle.dense_captions
                        ? "Object regions:\n" + dense_caption_lines(*bundle.dense_captions)
                        : "");
    t = replace_all(t, "{mask_summary}",
                    bundle.semantic_mask_summary
                        ? "Segmented regions:\n" + mask_summary_lines(*bundle.semantic_mask_summary)
                        : "");
    return t;
}

VlfRecord build_record(const ImagePairInput& pair, FusionTask task,
                       const std::string& source_dataset, ServiceClients& clients,
                       const PipelineOptions& opt, const std::string& manifest_dir) {
    namespace fs = std::filesystem;
    VlfRecord rec;
    rec.pair_id = pair.pair_id;
    rec.task = task;
    rec.source_dataset = source_dataset;
    rec.image_ref_1 = pair.image_ref_1;
    rec.image_ref_2 = pair.image_ref_2;

    fs::create_directories(fs::path(manifest_dir) / "embeddings");

    for (int k = 0; k < 2; ++k) {
        const Image& img = k == 0 ? pair.img1 : pair.img2;
        PromptBundle bundle;
        if (opt.use_caption)
            bundle.image_caption =
                with_retries("caption", opt, [&] { return clients.caption(img); });
        if (opt.use_dense_caption)
            bundle.dense_captions =
                with_retries("dense_caption", opt, [&] { return clients.dense_caption(img); });
        if (opt.use_mask_summary)
            bundle.semantic_mask_summary =
                with_retries("mask_summary", opt, [&] { return clients.mask_summary(img); });

        std::string description;
        if (opt.use_llm) {
            std::string prompt = compose_prompt(bundle, opt.prompt_template);
            // With no prompt stages at all, the raw image goes to the model.
            const Image* raw = (!bundle.image_caption && !bundle.dense_captions &&
                                !bundle.semantic_mask_summary)
                                   ? &img
                                   : nullptr;
            description =
                with_retries("paragraph", opt, [&] { return clients.paragraph(prompt, raw); });
        } else {
            // Concatenate the three captions verbatim, joined by newlines.
            std::ostringstream os;
            if (bundle.image_caption) os << *bundle.image_caption << "\n";
            if (bundle.dense_captions) os << dense_caption_lines(*bundle.dense_captions);
            if (bundle.semantic_mask_summary)
                os << mask_summary_lines(*bundle.semantic_mask_summary);
            description = os.str();
            while (!description.empty() && description.back() == '\n') description.pop_back();
        }

        bool validated = false;
        try {
            validated = validate_description(description).passed;
        } catch (const ValidationError&) {
            validated = false;
        }

        std::string ref = "embeddings/" + pair.pair_id + "_" + std::to_string(k + 1) + ".vlfe";
        TextFeature feat = stub_embed(description.empty() ? "(none)" : description, opt.embed_dim,
                                      opt.seed ^ fnv1a64(pair.pair_id) ^ static_cast<uint64_t>(k));
        write_embedding((fs::path(manifest_dir) / ref).string(), feat);

        if (k == 0) {
            rec.description_1 = description;
            rec.embedding_ref_1 = ref;
            rec.validated_1 = validated;
        } else {
            rec.description_2 = description;
            rec.embedding_ref_2 = ref;
            rec.validated_2 = validated;
        }
    }
    return rec;
}

}  // namespace tgfuse
