#include "dialogkit/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

namespace dialogkit::retrieval {

using json = nlohmann::json;

std::vector<std::string> index_terms(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  auto flush = [&](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return;
    const auto e = s.find_last_not_of(" \t\r");
    out.push_back(s.substr(b, e - b + 1));
  };
  std::string cur;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n') {
      flush(std::move(cur));
      cur.clear();
      continue;
    }
    cur.push_back(c);
    if ((c == '.' || c == '!' || c == '?') && i + 1 < text.size() && text[i + 1] == ' ') {
      flush(std::move(cur));
      cur.clear();
    }
  }
  flush(std::move(cur));
  return out;
}

TfIdfIndex::TfIdfIndex(std::vector<Document> docs) : docs_(std::move(docs)) {
  std::vector<std::unordered_map<std::string, std::size_t>> tf(docs_.size());
  for (std::size_t d = 0; d < docs_.size(); ++d) {
    for (auto& t : index_terms(docs_[d].title)) ++tf[d][t];
    for (const auto& s : docs_[d].sentences) {
      for (auto& t : index_terms(s)) ++tf[d][t];
    }
    for (const auto& [term, count] : tf[d]) postings_[term].emplace_back(d, count);
  }
  for (auto& [term, list] : postings_) std::sort(list.begin(), list.end());
  norms_.assign(docs_.size(), 0.0);
  for (const auto& [term, list] : postings_) {
    const double w_idf = idf(term);
    for (const auto& [d, count] : list) {
      const double w = static_cast<double>(count) * w_idf;
      norms_[d] += w * w;
    }
  }
  for (auto& n : norms_) n = std::sqrt(n);
}

std::size_t TfIdfIndex::df(const std::string& term) const {
  const auto it = postings_.find(term);
  return it == postings_.end() ? 0 : it->second.size();
}

double TfIdfIndex::idf(const std::string& term) const {
  const std::size_t n = df(term);
  if (n == 0) return 0.0;
  return std::log(static_cast<double>(docs_.size()) / static_cast<double>(n));
}

std::vector<DocHit> TfIdfIndex::query(std::string_view text, std::size_t top_n) const {
  std::unordered_map<std::string, std::size_t> qtf;
  for (auto& t : index_terms(text)) ++qtf[t];
  std::vector<double> dot(docs_.size(), 0.0);
  double qnorm = 0.0;
  for (const auto& [term, count] : qtf) {
    const auto it = postings_.find(term);
    if (it == postings_.end()) continue;
    const double w_idf = idf(term);
    const double qw = static_cast<double>(count) * w_idf;
    qnorm += qw * qw;
    for (const auto& [d, dcount] : it->second) dot[d] += qw * static_cast<double>(dcount) * w_idf;
  }
  if (qnorm == 0.0 || top_n == 0) return {};
  qnorm = std::sqrt(qnorm);
  std::vector<DocHit> hits(docs_.size());
  for (std::size_t d = 0; d < docs_.size(); ++d) {
    hits[d] = {d, norms_[d] > 0.0 ? dot[d] / (qnorm * norms_[d]) : 0.0};
  }
  const std::size_t keep = std::min(top_n, hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep), hits.end(),
                    [](const DocHit& a, const DocHit& b) {
                      return a.score != b.score ? a.score > b.score : a.doc < b.doc;
                    });
  hits.resize(keep);
  return hits;
}

TfIdfIndex TfIdfIndex::from_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw std::runtime_error("knowledge directory not found: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  std::vector<Document> docs;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    const auto nl = text.find('\n');
    Document doc;
    doc.title = text.substr(0, nl);
    if (!doc.title.empty() && doc.title.back() == '\r') doc.title.pop_back();
    if (nl != std::string::npos) doc.sentences = split_sentences(std::string_view(text).substr(nl + 1));
    docs.push_back(std::move(doc));
  }
  return TfIdfIndex(std::move(docs));
}

// The file stores the documents; postings and norms are rebuilt on load,
// which is cheap and keeps the file and the scoring in step.
void TfIdfIndex::save(const std::filesystem::path& path) const {
  json j;
  j["format"] = kIndexFormat;
  j["version"] = kIndexVersion;
  j["documents"] = json::array();
  for (const auto& d : docs_) j["documents"].push_back({{"title", d.title}, {"sentences", d.sentences}});
  j["terms"] = postings_.size();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write index: " + path.string());
  out << j.dump() << '\n';
}

TfIdfIndex TfIdfIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read index: " + path.string());
  const json j = json::parse(in);
  if (j.value("format", "") != kIndexFormat) throw std::runtime_error("not a tf-idf index file");
  if (j.value("version", 0) != kIndexVersion) {
    throw std::runtime_error("unsupported index version " + std::to_string(j.value("version", 0)));
  }
  std::vector<Document> docs;
  for (const auto& d : j.at("documents")) {
    docs.push_back({d.at("title").get<std::string>(), d.at("sentences").get<std::vector<std::string>>()});
  }
  TfIdfIndex idx(std::move(docs));
  if (j.contains("terms") && j["terms"].get<std::size_t>() != idx.postings_.size()) {
    throw std::runtime_error("index file is inconsistent with its documents");
  }
  return idx;
}

CandidateStore CandidateStore::from_texts(std::span<const std::string> texts,
                                          const bpe::Vocab& vocab) {
  std::vector<Candidate> out;
  std::unordered_set<std::string> seen;
  for (const auto& t : texts) {
    if (t.empty() || !seen.insert(t).second) continue;
    auto ids = bpe::truncate_label(vocab.encode(t));
    out.push_back({t, std::move(ids)});
  }
  return CandidateStore(std::move(out));
}

const std::vector<std::vector<double>>& CandidateStore::encodings(
    const model::PolyEncoder& retriever) {
  const std::uint64_t key = retriever.params().fingerprint();
  if (!cached_ || key != cache_key_) {
    cache_.clear();
    cache_.reserve(candidates_.size());
    for (const auto& c : candidates_) cache_.push_back(retriever.encode_candidate(c.tokens));
    cache_key_ = key;
    cached_ = true;
  }
  return cache_;
}

void CandidateStore::invalidate() {
  cache_.clear();
  cached_ = false;
  cache_key_ = 0;
}

namespace {

Retrieved best_of(const std::vector<double>& scores) {
  Retrieved r{0, scores.at(0)};
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > r.score) r = {i, scores[i]};
  }
  return r;
}

}  // namespace

Retrieved retrieve_response(const model::PolyEncoder& retriever, std::span<const TokenId> context,
                            CandidateStore& store) {
  if (store.empty()) throw std::invalid_argument("retrieve_response: empty candidate store");
  return best_of(retriever.score_cached(context, store.encodings(retriever)));
}

bool knowledge_gate(const model::Classifier& gate, std::span<const TokenId> context) {
  return gate.flag(context);
}

std::string_view refine_mode_name(RefineMode m) {
  switch (m) {
    case RefineMode::kNone: return "none";
    case RefineMode::kDialogue: return "dialogue";
    case RefineMode::kKnowledge: return "knowledge";
  }
  return "none";
}

RefineMode parse_refine_mode(std::string_view name) {
  if (name == "none") return RefineMode::kNone;
  if (name == "dialogue") return RefineMode::kDialogue;
  if (name == "knowledge") return RefineMode::kKnowledge;
  throw std::invalid_argument("unknown retrieve-and-refine mode: " + std::string(name));
}

TokenIds append_conditioning(std::span<const TokenId> context, std::span<const TokenId> extra,
                             TokenId separator, std::size_t limit) {
  TokenIds ids(context.begin(), context.end());
  ids.push_back(separator);
  ids.insert(ids.end(), extra.begin(), extra.end());
  return bpe::truncate_context(std::move(ids), limit);
}

RefineResult retrieve_and_refine(const decoding::LanguageModel& generator,
                                 std::span<const TokenId> context, std::string_view query_text,
                                 const RefineConfig& cfg, const RefineResources& res) {
  RefineResult out;
  std::optional<TokenIds> extra;
  try {
    if (cfg.mode == RefineMode::kDialogue) {
      if (!res.retriever || !res.store) throw std::runtime_error("no retriever or candidate store");
      const auto r = retrieve_response(*res.retriever, context, *res.store);
      out.conditioning = res.store->at(r.index).text;
      extra = res.store->at(r.index).tokens;
    } else if (cfg.mode == RefineMode::kKnowledge) {
      out.gate_open = !res.gate || knowledge_gate(*res.gate, context);
      if (out.gate_open) {
        if (!res.index || !res.retriever || !res.vocab) {
          throw std::runtime_error("no index, retriever or vocabulary");
        }
        const auto hits = res.index->query(query_text, cfg.top_docs);
        if (hits.empty() || !(hits.front().score > 0.0)) {
          throw std::runtime_error("no document matches the query");
        }
        std::vector<TokenIds> cands;
        std::vector<std::pair<std::size_t, const std::string*>> source;
        for (const auto& h : hits) {
          if (!(h.score > 0.0)) break;
          for (const auto& s : res.index->doc(h.doc).sentences) {
            auto ids = bpe::truncate_label(res.vocab->encode(s));
            if (ids.empty()) continue;
            cands.push_back(std::move(ids));
            source.emplace_back(h.doc, &s);
          }
        }
        if (cands.empty()) throw std::runtime_error("matching documents have no sentences");
        const auto best = best_of(res.retriever->score(context, cands));
        out.doc = source[best.index].first;
        out.conditioning = *source[best.index].second;
        extra = std::move(cands[best.index]);
      }
    }
  } catch (const std::exception& e) {
    out.retrieval_failed = true;
    out.error = e.what();
    extra.reset();
    out.doc.reset();
    out.conditioning.clear();
  }
  if (extra) {
    out.generator_input = append_conditioning(context, *extra, cfg.separator, cfg.limit);
    out.conditioned = true;
  } else {
    out.generator_input.assign(context.begin(), context.end());
  }
  out.decoded = decoding::decode(generator, out.generator_input, cfg.decode);
  return out;
}

}  // namespace dialogkit::retrieval
