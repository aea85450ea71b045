#include "tgfuse/mock_server.hpp"

#include <json.hpp>

#include "tgfuse/rng.hpp"

namespace tgfuse {

using nlohmann::json;

namespace {

uint64_t body_image_hash(const json& req) {
    if (!req.contains("image_b64")) return 0;
    return fnv1a64(base64_decode(req.at("image_b64").get<std::string>()));
}

}  // namespace

void register_mock_service_routes(httplib::Server& srv, uint64_t seed) {
    srv.Post("/caption", [seed](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body);
        json out;
        out["caption"] = mock_caption_text(body_image_hash(body), seed);
        res.set_content(out.dump(), "application/json");
    });
    srv.Post("/dense_caption", [seed](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body);
        json out;
        out["captions"] = json::array();
        for (const auto& dc : mock_dense_captions(body_image_hash(body), seed)) {
            json item;
            item["box"] = {dc.box[0], dc.box[1], dc.box[2], dc.box[3]};
            item["phrase"] = dc.phrase;
            out["captions"].push_back(item);
        }
        res.set_content(out.dump(), "application/json");
    });
    srv.Post("/mask_summary", [seed](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body);
        json out;
        out["regions"] = mock_mask_summaries(body_image_hash(body), seed);
        res.set_content(out.dump(), "application/json");
    });
    srv.Post("/paragraph", [seed](const httplib::Request& req, httplib::Response& res) {
        json body = json::parse(req.body);
        uint64_t h = fnv1a64(body.at("prompt").get<std::string>());
        if (body.contains("image_b64")) h ^= body_image_hash(body);
        json out;
        out["paragraph"] = mock_paragraph_text(h, seed);
        res.set_content(out.dump(), "application/json");
    });
}

}  // namespace tgfuse
