#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dialogkit/app/model_dir.hpp"
#include "dialogkit/app/store.hpp"
#include "dialogkit/decoding.hpp"
#include "dialogkit/eval.hpp"
#include "dialogkit/retrieval.hpp"
#include "dialogkit/safety.hpp"

namespace dialogkit::app {

// Error with an HTTP-style status, raised by the service for bad requests.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, const std::string& message) : std::runtime_error(message), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

// A generator ready to chat, with optional retrieve-and-refine resources.
struct ChatModel {
  std::string tag;
  std::shared_ptr<const LoadedModel> generator;
  decoding::DecodeConfig decode;
  retrieval::RefineMode refine = retrieval::RefineMode::kNone;
  std::shared_ptr<const LoadedModel> retriever;
  std::shared_ptr<const LoadedModel> gate;
  std::shared_ptr<retrieval::CandidateStore> candidates;  // dialogue mode
  std::shared_ptr<const retrieval::TfIdfIndex> index;     // knowledge mode
};

struct ServiceConfig {
  std::vector<std::vector<std::string>> personas;
  std::vector<std::string> topics;
  double topic_probability = 1.0 / 3.0;
  std::optional<safety::WordList> wordlist;
  std::shared_ptr<const LoadedModel> safety_classifier;
  std::string canned_message = std::string(safety::kDefaultCannedMessage);
  std::uint64_t seed = 0;
};

// Everything the HTTP API does, callable in-process. Payloads are JSON
// objects carrying schema_version. Sessions are rebuilt from the store on
// construction, so a restarted service shows the same sessions.
class Service {
 public:
  Service(Store& store, ServiceConfig config);
  ~Service();

  // All models must share one vocabulary. Call before serving.
  void add_model(ChatModel model);
  std::vector<std::string> model_tags() const;

  nlohmann::json health() const;

  // {model, persona?: [lines], topic?: string|null, seed?: uint}
  nlohmann::json create_session(const nlohmann::json& request);
  nlohmann::json get_session(const std::string& id) const;
  // {text} -> {reply, flagged, safety, retrieval, turn}
  nlohmann::json post_message(const std::string& id, const nlohmann::json& request);

  // type filter: "chat_log", "self_chat_log" or empty for both.
  nlohmann::json list_logs(const std::string& type) const;
  nlohmann::json get_log(const std::string& id) const;
  // A self-chat log line (or {"log": ...}) produced elsewhere.
  nlohmann::json import_log(const nlohmann::json& request);

  // {log_a, log_b, question, model_a?, model_b?}
  nlohmann::json create_acute_task(const nlohmann::json& request);
  // Next trial this annotator has not judged, with randomized side order.
  nlohmann::json next_acute_pair(const std::string& annotator, const std::string& question) const;
  // {trial, annotator, choice: "first"|"second" (or winner: "A"|"B"), justification}
  nlohmann::json submit_judgment(const nlohmann::json& request);
  // {judgment, reason}: the judgment stays stored but leaves the aggregate.
  nlohmann::json flag_judgment(const nlohmann::json& request);
  nlohmann::json acute_results() const;

  // Display order for an annotator is a fixed function of trial and annotator.
  static bool shown_swapped(const std::string& trial, const std::string& annotator);
  std::vector<eval::AcuteTrial> acute_trials() const;

  const safety::SafetyGate& gate() const { return *gate_; }

 private:
  struct Session;
  struct ModelSlot;

  Session& session(const std::string& id) const;
  nlohmann::json session_view(const Session& s) const;
  nlohmann::json log_turns(const Record& r) const;
  void restore();

  Store& store_;
  ServiceConfig config_;
  std::map<std::string, std::unique_ptr<ModelSlot>> models_;
  std::optional<bpe::Vocab> vocab_;
  std::unique_ptr<safety::SafetyGate> gate_;
  mutable std::mutex sessions_mu_;
  std::map<std::string, std::unique_ptr<Session>> sessions_;
  std::mutex create_mu_;
  std::mutex acute_mu_;
};

}  // namespace dialogkit::app
