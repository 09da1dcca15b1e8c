#include "dialogkit/app/http.hpp"

#include <httplib.h>

#include "dialogkit/app/service.hpp"

namespace dialogkit::app {

using json = nlohmann::json;

namespace {

void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(-1, ' ', false, json::error_handler_t::replace), "application/json");
}

json body_of(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    throw ApiError(400, std::string("malformed JSON: ") + e.what());
  }
}

// Runs a handler, mapping errors to JSON error responses.
template <typename F>
httplib::Server::Handler wrap(F f, int ok_status = 200) {
  return [f, ok_status](const httplib::Request& req, httplib::Response& res) {
    try {
      send(res, ok_status, f(req));
    } catch (const ApiError& e) {
      send(res, e.status(), {{"schema_version", kSchemaVersion}, {"error", e.what()}});
    } catch (const std::exception& e) {
      send(res, 500, {{"schema_version", kSchemaVersion}, {"error", e.what()}});
    }
  };
}

}  // namespace

void install_routes(httplib::Server& server, Service& service) {
  const std::string p = kApiPrefix;
  server.Get(p + "/health", wrap([&](const auto&) { return service.health(); }));
  server.Post(p + "/sessions",
              wrap([&](const auto& req) { return service.create_session(body_of(req)); }, 201));
  server.Get(p + R"(/sessions/([\w-]+))",
             wrap([&](const auto& req) { return service.get_session(req.matches[1]); }));
  server.Post(p + R"(/sessions/([\w-]+)/messages)", wrap([&](const auto& req) {
                return service.post_message(req.matches[1], body_of(req));
              }));
  server.Get(p + "/logs", wrap([&](const auto& req) {
               return service.list_logs(req.has_param("type") ? req.get_param_value("type") : "");
             }));
  server.Post(p + "/logs/import",
              wrap([&](const auto& req) { return service.import_log(body_of(req)); }, 201));
  server.Get(p + R"(/logs/([\w-]+))",
             wrap([&](const auto& req) { return service.get_log(req.matches[1]); }));
  server.Post(p + "/acute/tasks",
              wrap([&](const auto& req) { return service.create_acute_task(body_of(req)); }, 201));
  server.Get(p + "/acute/next", wrap([&](const auto& req) {
               return service.next_acute_pair(req.get_param_value("annotator"),
                                              req.get_param_value("question"));
             }));
  server.Post(p + "/acute/judgments",
              wrap([&](const auto& req) { return service.submit_judgment(body_of(req)); }, 201));
  server.Post(p + "/acute/flags",
              wrap([&](const auto& req) { return service.flag_judgment(body_of(req)); }, 201));
  server.Get(p + "/acute/results", wrap([&](const auto&) { return service.acute_results(); }));
}

}  // namespace dialogkit::app
