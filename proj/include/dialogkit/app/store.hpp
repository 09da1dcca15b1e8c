#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace dialogkit::app {

using json = nlohmann::json;

enum class RecordType { kEpisode, kChatLog, kSelfChatLog, kAcuteTrial, kJudgment, kReport };
std::string_view record_type_name(RecordType t);
RecordType parse_record_type(std::string_view name);

inline constexpr int kSchemaVersion = 1;
inline constexpr std::string_view kStoreFile = "store.jsonl";
inline constexpr const char* kStoreEnv = "DIALOGKIT_STORE";

struct Record {
  std::uint64_t seq = 0;  // 1-based, gapless within a store file
  RecordType type = RecordType::kReport;
  int schema_version = kSchemaVersion;
  json payload;

  // "<type>-<seq>"
  std::string id() const;
  json to_json() const;
  static Record from_json(const json& j);
};

// Current time as an ISO 8601 UTC string.
std::string utc_timestamp();

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Append-only record log in one JSONL file. Appends are serialized and
// flushed to disk before they return; reads see a consistent prefix.
// Opening an existing file checks that sequence numbers are gapless. A final
// line without its newline is the trace of an interrupted append and is
// dropped.
class Store {
 public:
  explicit Store(const std::filesystem::path& dir);
  ~Store();
  Store(const Store&) = delete;
  Store& operator=(const Store&) = delete;

  // $DIALOGKIT_STORE, else `fallback`.
  static std::filesystem::path default_dir(const std::filesystem::path& fallback = "store");

  Record append(RecordType type, json payload);

  std::size_t size() const;
  std::vector<Record> snapshot() const;
  std::vector<Record> of_type(RecordType type) const;
  std::optional<Record> find(std::string_view id) const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  mutable std::shared_mutex mu_;
  std::vector<Record> records_;
};

}  // namespace dialogkit::app
