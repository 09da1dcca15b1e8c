#include "dialogkit/train.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dialogkit/decoding.hpp"
#include "dialogkit/eval.hpp"
#include "dialogkit/ops.hpp"

namespace dialogkit::train {

using nn::Tensor;

void Options::validate() const {
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(schedule.max_lr > 0.0)) throw std::invalid_argument("max_lr must be positive");
  if (schedule.warmup_steps < 0) throw std::invalid_argument("warmup_steps must be >= 0");
  if (time_budget < 0.0) throw std::invalid_argument("time_budget must be >= 0");
}

namespace {

using Clock = std::chrono::steady_clock;

struct Loop {
  // Runs one batch: accumulates gradients and returns the batch loss.
  std::function<double(std::span<const std::size_t>, Rng&, EpochStats&)> batch;
  std::function<double()> validate;  // may be empty
  std::function<void(std::span<const std::size_t>)> before_batch;  // may be empty
};

History run(nn::ParamStore& params, std::size_t n, const Options& opt, const Loop& loop,
            const EpochCallback& on_epoch) {
  opt.validate();
  if (n == 0) throw std::invalid_argument("no training examples");
  History hist;
  auto tensors = params.tensors();
  nn::AdamState adam;
  Rng rng(opt.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const auto t0 = Clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - t0).count(); };
  std::size_t steps = 0, rejected = 0;
  for (std::size_t epoch = 1; epoch <= opt.epochs && !hist.out_of_time; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    EpochStats st;
    st.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < n; b += opt.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(opt.batch_size, n - b));
      if (loop.before_batch) loop.before_batch(idx);
      params.zero_grad();
      loss_sum += loop.batch(idx, rng, st);
      ++batches;
      ++steps;
      if (nn::adam_step(tensors, adam, nn::lr_at(opt.schedule, adam.step + 1)) ==
          nn::AdamOutcome::kRejectedNonFinite) {
        ++rejected;
      }
      if (opt.time_budget > 0.0 && elapsed() > opt.time_budget) {
        hist.out_of_time = true;
        break;
      }
    }
    st.train_loss = loss_sum / static_cast<double>(batches);
    if (loop.validate) st.valid_metric = loop.validate();
    st.seconds = elapsed();
    st.steps = steps;
    st.rejected_steps = rejected;
    hist.epochs.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  params.zero_grad();
  return hist;
}

}  // namespace

History train_generator(model::Seq2Seq& model, std::span<const corpus::Example> train,
                        std::span<const corpus::Example> valid, const Options& opt,
                        const UnlikelihoodOptions& ul, const EpochCallback& on_epoch,
                        const ContextFn& context_fn, objectives::NgramTracker* tracker) {
  if (!(ul.alpha_mix >= 0.0)) throw std::invalid_argument("alpha_mix must be >= 0");
  const bool use_ul = ul.alpha_mix > 0.0;
  objectives::NgramTracker own(ul.n);
  objectives::NgramTracker& counts = tracker ? *tracker : own;
  const bool dropout = model.config().dropout > 0.0;
  std::vector<TokenIds> contexts(train.size());
  std::vector<TokenIds> generations(train.size());
  Rng ctx_rng(mix_seed(opt.seed, 1));

  Loop loop;
  loop.before_batch = [&](std::span<const std::size_t> idx) {
    // Contexts are fixed per batch so the generations below see the same
    // input as the loss.
    if (!context_fn && !use_ul) return;
    for (auto i : idx) {
      contexts[i] = context_fn ? context_fn(train[i], ctx_rng) : train[i].context;
    }
    if (!use_ul) return;
    decoding::TransformerLM lm(model);
    decoding::DecodeConfig greedy;
    greedy.method = decoding::Method::kGreedy;
    greedy.min_length = 0;
    greedy.block_context = greedy.block_response = false;
    greedy.max_length = ul.max_length;
    for (auto i : idx) {
      generations[i] = decoding::decode_greedy(lm, contexts[i], greedy).tokens;
      counts.add_model(generations[i]);
      // Paired with the same examples' gold responses, so both sides cover
      // the same contexts however the batches were drawn.
      counts.add_human(train[i].label);
    }
  };
  loop.batch = [&](std::span<const std::size_t> idx, Rng& rng, EpochStats& st) {
    const double inv = 1.0 / static_cast<double>(idx.size());
    double total = 0.0;
    for (auto i : idx) {
      const auto& ex = train[i];
      const TokenIds& ctx = (context_fn || use_ul) ? contexts[i] : ex.context;
      const auto tf = eval::teacher_forcing(ex.label);
      Rng* drop = dropout ? &rng : nullptr;
      const Tensor memory = model.encode(ctx, drop);
      Tensor loss = objectives::mle_loss(model.decode(memory, tf.input, drop), tf.target);
      if (use_ul) {
        const auto& gen = generations[i];
        const auto pos = objectives::select_negative_candidates(counts, gen);
        if (!pos.empty()) {
          std::vector<std::vector<TokenId>> cands(gen.size());
          for (auto t : pos) cands[t] = {gen[t]};
          const auto gin = eval::teacher_forcing(gen).input;
          const auto ul_loss = objectives::unlikelihood_loss(
              model.decode(memory, std::span(gin).first(gen.size()), drop), cands,
              tf.target.size());
          loss = objectives::mixed_loss(loss, ul_loss.loss, ul.alpha_mix);
          st.ul_candidates += pos.size();
        }
      }
      total += loss.item();
      nn::backward(nn::scale(loss, inv));
    }
    return total * inv;
  };
  if (!valid.empty()) loop.validate = [&] { return eval::perplexity(model, valid); };
  return run(model.params(), train.size(), opt, loop, on_epoch);
}

namespace {

Tensor batch_ranking_loss(const model::PolyEncoder& r, std::span<const corpus::Example> data,
                          std::span<const std::size_t> idx, Rng* drop) {
  std::vector<Tensor> cands;
  for (auto i : idx) cands.push_back(r.candidate_vector(data[i].label, drop));
  const Tensor c = nn::concat_rows(cands);
  std::vector<Tensor> rows;
  for (auto i : idx) {
    const Tensor s = r.score(r.context_globals(data[i].context, drop), c);
    rows.push_back(nn::reshape(s, {1, idx.size()}));
  }
  // A copy of the gold response elsewhere in the batch is not a negative.
  const std::size_t b = idx.size();
  std::vector<double> mask(b * b, 0.0);
  bool any = false;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      if (i != j && data[idx[i]].label == data[idx[j]].label) {
        mask[i * b + j] = -1e9;
        any = true;
      }
    }
  }
  Tensor scores = nn::concat_rows(rows);
  if (any) scores = nn::add(scores, Tensor::from({b, b}, std::move(mask)));
  return objectives::ranking_loss(scores);
}

}  // namespace

History train_retriever(model::PolyEncoder& retriever, std::span<const corpus::Example> train,
                        std::span<const corpus::Example> valid, const Options& opt,
                        const EpochCallback& on_epoch) {
  for (const auto& ex : train) {
    if (ex.label.empty()) throw std::invalid_argument("train_retriever: empty response");
  }
  const bool dropout = retriever.config().dropout > 0.0;
  Loop loop;
  loop.batch = [&](std::span<const std::size_t> idx, Rng& rng, EpochStats&) {
    Tensor loss = batch_ranking_loss(retriever, train, idx, dropout ? &rng : nullptr);
    nn::backward(loss);
    return loss.item();
  };
  if (!valid.empty()) {
    loop.validate = [&] {
      nn::NoGradGuard g;
      std::vector<std::size_t> all(valid.size());
      std::iota(all.begin(), all.end(), 0);
      double sum = 0.0;
      std::size_t batches = 0;
      for (std::size_t b = 0; b < all.size(); b += opt.batch_size) {
        const auto idx = std::span(all).subspan(b, std::min(opt.batch_size, all.size() - b));
        sum += batch_ranking_loss(retriever, valid, idx, nullptr).item();
        ++batches;
      }
      return sum / static_cast<double>(batches);
    };
  }
  return run(retriever.params(), train.size(), opt, loop, on_epoch);
}

double accuracy(const model::Classifier& classifier, std::span<const LabeledInput> data) {
  if (data.empty()) throw std::invalid_argument("accuracy: empty set");
  std::size_t right = 0;
  for (const auto& d : data) right += classifier.predict(d.input) == d.label;
  return static_cast<double>(right) / static_cast<double>(data.size());
}

History train_classifier(model::Classifier& classifier, std::span<const LabeledInput> train,
                         std::span<const LabeledInput> valid, const Options& opt,
                         const EpochCallback& on_epoch) {
  for (const auto& d : train) {
    if (d.label >= classifier.classes()) {
      throw std::invalid_argument("train_classifier: label outside classes");
    }
  }
  const bool dropout = classifier.config().dropout > 0.0;
  Loop loop;
  loop.batch = [&](std::span<const std::size_t> idx, Rng& rng, EpochStats&) {
    const double inv = 1.0 / static_cast<double>(idx.size());
    double total = 0.0;
    for (auto i : idx) {
      const int target = static_cast<int>(train[i].label);
      Tensor loss = nn::cross_entropy(
          classifier.logits(train[i].input, dropout ? &rng : nullptr), std::span(&target, 1));
      total += loss.item();
      nn::backward(nn::scale(loss, inv));
    }
    return total * inv;
  };
  if (!valid.empty()) loop.validate = [&] { return accuracy(classifier, valid); };
  return run(classifier.params(), train.size(), opt, loop, on_epoch);
}

}  // namespace dialogkit::train
