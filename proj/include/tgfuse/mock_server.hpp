#pragma once

#include <httplib.h>

#include "tgfuse/services.hpp"

namespace tgfuse {

// Registers /caption, /dense_caption, /mask_summary and /paragraph handlers
// answering with the same deterministic content as MockServiceClients.
void register_mock_service_routes(httplib::Server& srv, uint64_t seed);

}  // namespace tgfuse
