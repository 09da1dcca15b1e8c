#include "dialogkit/app/model_dir.hpp"

#include <stdexcept>

#include "dialogkit/checkpoint.hpp"

namespace dialogkit::app {

using json = nlohmann::json;

namespace {
constexpr std::string_view kKindNames[] = {"generator", "retriever", "gate", "safety", "length"};
}

std::string_view model_kind_name(ModelKind k) { return kKindNames[static_cast<int>(k)]; }

ModelKind parse_model_kind(std::string_view name) {
  for (int i = 0; i < 5; ++i) {
    if (kKindNames[i] == name) return static_cast<ModelKind>(i);
  }
  throw std::invalid_argument("unknown model kind: " + std::string(name));
}

std::size_t classifier_classes(ModelKind k) {
  switch (k) {
    case ModelKind::kGate:
    case ModelKind::kSafety: return 2;
    case ModelKind::kLength: return model::kLengthBins;
    default: return 0;
  }
}

const nn::ParamStore& LoadedModel::params() const {
  if (generator) return generator->params();
  if (retriever) return retriever->params();
  return classifier->params();
}

void save_model_dir(const std::filesystem::path& dir, ModelKind kind,
                    const model::TransformerConfig& config, const nn::ParamStore& params,
                    const bpe::Vocab& vocab, const json& meta, std::size_t codes) {
  std::filesystem::create_directories(dir);
  json desc = {{"format", "dialogkit.model"},
               {"version", kModelDirVersion},
               {"kind", model_kind_name(kind)},
               {"config", json::parse(config.to_json())},
               {"vocab_fingerprint", vocab.fingerprint()},
               {"param_fingerprint", params.fingerprint()},
               {"meta", meta}};
  if (kind == ModelKind::kRetriever) desc["codes"] = codes;
  nn::write_file_atomic(dir / "vocab.bpe", vocab.serialize());
  nn::save_checkpoint(dir / "model.ckpt", params, desc.dump());
  nn::write_file_atomic(dir / "model.json", desc.dump(2) + "\n");
}

std::shared_ptr<LoadedModel> load_model_dir(const std::filesystem::path& dir, bool trainable) {
  const json desc = json::parse(nn::read_file(dir / "model.json"));
  if (desc.value("format", "") != "dialogkit.model") {
    throw std::runtime_error(dir.string() + " is not a model directory");
  }
  if (desc.value("version", 0) != kModelDirVersion) {
    throw std::runtime_error("unsupported model directory version in " + dir.string());
  }
  auto m = std::make_shared<LoadedModel>();
  m->kind = parse_model_kind(desc.at("kind").get<std::string>());
  m->config = model::TransformerConfig::from_json(desc.at("config").dump());
  m->meta = desc.value("meta", json::object());
  m->vocab = bpe::Vocab::deserialize(nn::read_file(dir / "vocab.bpe"));
  if (m->vocab.fingerprint() != desc.at("vocab_fingerprint").get<std::uint64_t>()) {
    throw std::runtime_error("vocabulary in " + dir.string() + " does not match model.json");
  }
  auto ck = nn::load_checkpoint(dir / "model.ckpt", trainable);
  if (ck.params.fingerprint() != desc.at("param_fingerprint").get<std::uint64_t>()) {
    throw std::runtime_error("weights in " + dir.string() + " do not match model.json");
  }
  switch (m->kind) {
    case ModelKind::kGenerator:
      m->generator.emplace(m->config, std::move(ck.params));
      break;
    case ModelKind::kRetriever:
      m->codes = desc.at("codes").get<std::size_t>();
      m->retriever.emplace(m->config, m->codes, std::move(ck.params));
      break;
    default:
      m->classifier.emplace(m->config, classifier_classes(m->kind), std::move(ck.params));
  }
  return m;
}

}  // namespace dialogkit::app
