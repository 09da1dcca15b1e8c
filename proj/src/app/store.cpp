#include "dialogkit/app/store.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iostream>
#include <sstream>

namespace dialogkit::app {

namespace {

constexpr std::string_view kTypeNames[] = {"episode", "chat_log", "self_chat_log",
                                           "acute_trial", "judgment", "report"};

}  // namespace

std::string_view record_type_name(RecordType t) { return kTypeNames[static_cast<int>(t)]; }

RecordType parse_record_type(std::string_view name) {
  for (int i = 0; i < 6; ++i) {
    if (kTypeNames[i] == name) return static_cast<RecordType>(i);
  }
  throw std::invalid_argument("unknown record type: " + std::string(name));
}

std::string Record::id() const {
  return std::string(record_type_name(type)) + "-" + std::to_string(seq);
}

json Record::to_json() const {
  return {{"seq", seq},
          {"type", record_type_name(type)},
          {"schema_version", schema_version},
          {"payload", payload}};
}

Record Record::from_json(const json& j) {
  Record r;
  r.seq = j.at("seq").get<std::uint64_t>();
  r.type = parse_record_type(j.at("type").get<std::string>());
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kSchemaVersion) {
    throw StoreError("unsupported record schema version " + std::to_string(r.schema_version));
  }
  r.payload = j.at("payload");
  return r;
}

Store::Store(const std::filesystem::path& dir) : path_(dir / kStoreFile) {
  std::filesystem::create_directories(dir);
  std::string content;
  {
    std::ifstream in(path_, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    content = ss.str();
  }
  std::size_t pos = 0, valid_end = 0;
  while (pos < content.size()) {
    const auto nl = content.find('\n', pos);
    if (nl == std::string::npos) {
      std::cerr << "store: dropping incomplete final record in " << path_ << "\n";
      break;
    }
    const std::string_view line(content.data() + pos, nl - pos);
    if (!line.empty()) {
      Record r;
      try {
        r = Record::from_json(json::parse(line));
      } catch (const StoreError&) {
        throw;
      } catch (const std::exception& e) {
        throw StoreError("corrupt store record at byte " + std::to_string(pos) + ": " + e.what());
      }
      if (r.seq != records_.size() + 1) {
        throw StoreError("store sequence gap: expected " + std::to_string(records_.size() + 1) +
                         ", found " + std::to_string(r.seq));
      }
      records_.push_back(std::move(r));
    }
    pos = nl + 1;
    valid_end = pos;
  }
  if (valid_end < content.size()) std::filesystem::resize_file(path_, valid_end);
  fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw StoreError("cannot open store " + path_.string() + ": " + std::strerror(errno));
}

Store::~Store() {
  if (fd_ >= 0) ::close(fd_);
}

std::string utc_timestamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::filesystem::path Store::default_dir(const std::filesystem::path& fallback) {
  const char* env = std::getenv(kStoreEnv);
  return env && *env ? std::filesystem::path(env) : fallback;
}

Record Store::append(RecordType type, json payload) {
  std::unique_lock lock(mu_);
  Record r;
  r.seq = records_.size() + 1;
  r.type = type;
  r.payload = std::move(payload);
  const std::string line = r.to_json().dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
  std::size_t done = 0;
  while (done < line.size()) {
    const auto n = ::write(fd_, line.data() + done, line.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw StoreError(std::string("store write failed: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fdatasync(fd_) != 0) throw StoreError(std::string("store sync failed: ") + std::strerror(errno));
  records_.push_back(r);
  return r;
}

std::size_t Store::size() const {
  std::shared_lock lock(mu_);
  return records_.size();
}

std::vector<Record> Store::snapshot() const {
  std::shared_lock lock(mu_);
  return records_;
}

std::vector<Record> Store::of_type(RecordType type) const {
  std::shared_lock lock(mu_);
  std::vector<Record> out;
  for (const auto& r : records_) {
    if (r.type == type) out.push_back(r);
  }
  return out;
}

std::optional<Record> Store::find(std::string_view id) const {
  const auto dash = id.rfind('-');
  if (dash == std::string_view::npos) return std::nullopt;
  std::uint64_t seq = 0;
  try {
    seq = std::stoull(std::string(id.substr(dash + 1)));
  } catch (const std::exception&) {
    return std::nullopt;
  }
  std::shared_lock lock(mu_);
  if (seq == 0 || seq > records_.size()) return std::nullopt;
  const auto& r = records_[seq - 1];
  if (record_type_name(r.type) != id.substr(0, dash)) return std::nullopt;
  return r;
}

}  // namespace dialogkit::app
