#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "dialogkit/bpe.hpp"
#include "dialogkit/model.hpp"

namespace dialogkit::app {

// A trained model on disk: model.json (kind, architecture, extra metadata),
// model.ckpt (weights) and vocab.bpe.
enum class ModelKind { kGenerator, kRetriever, kGate, kSafety, kLength };
std::string_view model_kind_name(ModelKind k);
ModelKind parse_model_kind(std::string_view name);
std::size_t classifier_classes(ModelKind k);  // 0 for non-classifiers

inline constexpr int kModelDirVersion = 1;

struct LoadedModel {
  ModelKind kind = ModelKind::kGenerator;
  model::TransformerConfig config;
  std::size_t codes = 0;  // retriever only
  bpe::Vocab vocab;
  nlohmann::json meta;    // whatever the trainer recorded
  std::optional<model::Seq2Seq> generator;
  std::optional<model::PolyEncoder> retriever;
  std::optional<model::Classifier> classifier;

  const nn::ParamStore& params() const;
};

void save_model_dir(const std::filesystem::path& dir, ModelKind kind,
                    const model::TransformerConfig& config, const nn::ParamStore& params,
                    const bpe::Vocab& vocab, const nlohmann::json& meta, std::size_t codes = 0);

// `trainable` loads weights with gradients enabled, for fine-tuning.
std::shared_ptr<LoadedModel> load_model_dir(const std::filesystem::path& dir, bool trainable = false);

}  // namespace dialogkit::app
