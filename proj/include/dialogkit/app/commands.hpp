#pragma once

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dialogkit/app/service.hpp"
#include "dialogkit/eval.hpp"

// The subcommands of the dialogkit tool as library calls. Settings for a
// command are a flat JSON object; every key has a default, a config file may
// override any of them and flags override the file.
namespace dialogkit::app {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string>& command_names();
std::string_view command_summary(std::string_view command);

// Every key `command` accepts, with its default. A null default marks an
// optional value of any type.
nlohmann::json command_defaults(std::string_view command);

// Layers `overrides` onto `settings`. Unknown keys and values whose type
// differs from the default are ConfigErrors naming `origin`.
void merge_settings(nlohmann::json& settings, const nlohmann::json& overrides,
                    std::string_view origin);

// A flag's text read as the type of the key's default.
nlohmann::json parse_flag_value(const nlohmann::json& default_value, const std::string& raw);

// Defaults, then the config file (if any), then flags in order.
nlohmann::json resolve_settings(std::string_view command, const std::string& config_path,
                                const std::vector<std::pair<std::string, std::string>>& flags);

// Runs a command on resolved settings. Artifacts land where the settings say,
// together with a run-metadata record; the returned summary is the record's
// "result" field. Progress goes to `log`.
nlohmann::json run_command(std::string_view command, const nlohmann::json& settings,
                           std::ostream& log);

// "<version>+<git revision>" as configured at build time.
std::string code_version();

// ---------------------------------------------------------------------------
// Pieces shared with tests and the acceptance checks

struct SelfChatOptions {
  std::size_t pairs = 100;
  std::size_t turns = eval::kSelfChatTurns;
  std::size_t seed_turns = 2;  // opening turns copied from each seed episode
  std::uint64_t seed = 1;
  decoding::DecodeConfig decode_a, decode_b;
};

struct SelfChatRun {
  std::vector<eval::SelfChatLog> logs;
  std::size_t replayed = 0;
  std::size_t replay_mismatches = 0;
};

// Conversation i continues seed episode i mod |seeds| (personas, topic and
// the first seed_turns turns) with conversation seed mix_seed(seed, i).
// With `verify`, every log is replayed from its record and compared.
SelfChatRun collect_self_chats(const eval::SelfChatSide& a, const eval::SelfChatSide& b,
                               std::span<const corpus::DialogueEpisode> seeds,
                               const SelfChatOptions& opt, const bpe::Vocab& vocab, bool verify);

void write_self_chat_logs(const std::string& path, std::span<const eval::SelfChatLog> logs);
std::vector<eval::SelfChatLog> read_self_chat_logs(const std::string& path);

// Two-line personas separated by blank lines.
std::vector<std::vector<std::string>> read_personas(const std::string& path);
void write_personas(const std::string& path, std::span<const std::vector<std::string>> personas);
// Non-blank lines, trimmed.
std::vector<std::string> read_lines(const std::string& path);

// A chat model from a spec: "tag=dir", "dir", or an object with keys dir,
// tag, refine, retriever, gate, candidates (episode file) and index.
ChatModel load_chat_model(const nlohmann::json& spec, const nlohmann::json& decode_patch);

}  // namespace dialogkit::app
