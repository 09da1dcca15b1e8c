#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "dialogkit/corpus.hpp"
#include "dialogkit/model.hpp"
#include "dialogkit/objectives.hpp"
#include "dialogkit/optim.hpp"

namespace dialogkit::train {

struct Options {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  nn::LrSchedule schedule{1e-3, 100};
  // Wall-clock limit in seconds; training stops after the step that crosses
  // it. Zero means no limit.
  double time_budget = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;         // 1-based
  double train_loss = 0.0;       // mean batch loss
  double valid_metric = std::numeric_limits<double>::quiet_NaN();
  double seconds = 0.0;          // since training started
  std::size_t steps = 0;         // optimizer steps so far
  std::size_t rejected_steps = 0;
  std::size_t ul_candidates = 0;  // tokens penalized this epoch
};

struct History {
  std::vector<EpochStats> epochs;
  bool out_of_time = false;
};

using EpochCallback = std::function<void(const EpochStats&)>;

struct UnlikelihoodOptions {
  double alpha_mix = 0.0;  // 0 disables the unlikelihood term entirely
  std::size_t n = 3;
  // Length cap for the greedy generations that feed the model counts.
  std::size_t max_length = 32;
};

// Rewrites an example's context before each use, e.g. to append a retrieved
// or gold response for retrieve-and-refine training.
using ContextFn = std::function<TokenIds(const corpus::Example&, Rng&)>;

// MLE (optionally mixed with unlikelihood) on label + end token. The valid
// metric is perplexity on `valid` when it is nonempty. With unlikelihood, the
// running counts are refreshed once per batch: model counts from greedy
// generations for the batch's contexts, human counts from the same examples'
// gold responses. `tracker`, if given, accumulates them across calls.
History train_generator(model::Seq2Seq& model, std::span<const corpus::Example> train,
                        std::span<const corpus::Example> valid, const Options& opt,
                        const UnlikelihoodOptions& ul = {}, const EpochCallback& on_epoch = {},
                        const ContextFn& context_fn = {},
                        objectives::NgramTracker* tracker = nullptr);

// In-batch-negative ranking: each batch scores every context against every
// response in it. The valid metric is the mean ranking loss over `valid`
// batches of the same size.
History train_retriever(model::PolyEncoder& retriever, std::span<const corpus::Example> train,
                        std::span<const corpus::Example> valid, const Options& opt,
                        const EpochCallback& on_epoch = {});

struct LabeledInput {
  TokenIds input;
  std::size_t label = 0;
};

// Cross-entropy over the classifier's classes; the valid metric is accuracy.
History train_classifier(model::Classifier& classifier, std::span<const LabeledInput> train,
                         std::span<const LabeledInput> valid, const Options& opt,
                         const EpochCallback& on_epoch = {});

double accuracy(const model::Classifier& classifier, std::span<const LabeledInput> data);

}  // namespace dialogkit::train
