#pragma once

#include <string>

namespace httplib {
class Server;
}

namespace dialogkit::app {

class Service;

inline constexpr const char* kApiPrefix = "/api/v1";

// Routes, all JSON in and out:
//   GET  /api/v1/health
//   POST /api/v1/sessions                 GET /api/v1/sessions/{id}
//   POST /api/v1/sessions/{id}/messages
//   GET  /api/v1/logs?type=               GET /api/v1/logs/{id}
//   POST /api/v1/logs/import
//   POST /api/v1/acute/tasks              GET /api/v1/acute/next?annotator=&question=
//   POST /api/v1/acute/judgments          POST /api/v1/acute/flags
//   GET  /api/v1/acute/results
// Errors come back as {"schema_version": 1, "error": message} with a 4xx
// status.
void install_routes(httplib::Server& server, Service& service);

}  // namespace dialogkit::app
