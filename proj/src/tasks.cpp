#include "petlab/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "petlab/errors.hpp"

namespace petlab {

Batch Dataset::gather(const std::vector<std::size_t>& indices) const {
  Batch b;
  b.inputs.reserve(indices.size());
  b.labels.reserve(indices.size());
  for (auto i : indices) {
    if (i >= size()) throw IndexError("dataset index " + std::to_string(i) + " out of range");
    b.inputs.push_back(inputs[i]);
    b.labels.push_back(labels[i]);
  }
  return b;
}

Batch Dataset::slice(std::size_t begin, std::size_t end) const {
  end = std::min(end, size());
  Batch b;
  for (std::size_t i = begin; i < end; ++i) {
    b.inputs.push_back(inputs[i]);
    b.labels.push_back(labels[i]);
  }
  return b;
}

TaskFamily parse_task_family(std::string_view name) {
  if (name == "majority") return TaskFamily::Majority;
  if (name == "containment") return TaskFamily::Containment;
  if (name == "modsum") return TaskFamily::ModSum;
  throw ConfigError("unknown task family '" + std::string(name) + "'");
}

std::string_view task_family_name(TaskFamily family) {
  switch (family) {
    case TaskFamily::Majority:
      return "majority";
    case TaskFamily::Containment:
      return "containment";
    case TaskFamily::ModSum:
      return "modsum";
  }
  return "?";
}

void TaskSpec::validate() const {
  if (name.empty()) throw ConfigError("task name must not be empty");
  if (num_classes < 2) throw ConfigError("tasks need at least two classes");
  if (seq_len < 2) throw ConfigError("seq_len must be at least 2");
  if (train_size == 0 || val_size == 0 || test_size == 0) throw ConfigError("task splits must be non-empty");
  if (filler_start >= vocab_size) throw ConfigError("filler_start must be below vocab_size");
  if (family == TaskFamily::Containment) {
    if (num_classes != 2) throw ConfigError("containment tasks are binary");
    if (pattern_len == 0 || pattern_len > seq_len) throw ConfigError("pattern_len must lie in [1, seq_len]");
  }
  if (num_distractors > 0) {
    if (family != TaskFamily::Majority) throw ConfigError("distractor tokens are a majority-task option");
    const bool disjoint = distractor_token + num_distractors <= first_token || distractor_token >= first_token + num_classes;
    if (!disjoint) throw ConfigError("distractor tokens overlap the designated tokens");
    if (distractor_token + num_distractors > vocab_size) throw ConfigError("distractor tokens exceed vocab_size");
  }
  const std::size_t reserved = reserved_tokens();
  if (first_token + reserved > vocab_size) throw ConfigError("designated tokens exceed vocab_size");
  // Fillers skip the reserved range.
  const std::size_t lo = filler_start;
  std::size_t overlap = 0;
  for (std::size_t t = first_token; t < first_token + reserved; ++t) overlap += t >= lo ? 1 : 0;
  if (vocab_size - lo - overlap < std::max<std::size_t>(num_classes, 2)) {
    throw ConfigError("filler range too small");
  }
}

Json task_spec_to_json(const TaskSpec& s) {
  Json j;
  j["name"] = s.name;
  j["family"] = task_family_name(s.family);
  j["vocab_size"] = s.vocab_size;
  j["seq_len"] = s.seq_len;
  j["num_classes"] = s.num_classes;
  j["train_size"] = s.train_size;
  j["val_size"] = s.val_size;
  j["test_size"] = s.test_size;
  j["seed"] = s.seed;
  j["first_token"] = s.first_token;
  j["filler_start"] = s.filler_start;
  j["pattern_len"] = s.pattern_len;
  if (s.num_distractors > 0) {
    j["distractor_token"] = s.distractor_token;
    j["num_distractors"] = s.num_distractors;
  }
  return j;
}

TaskSpec task_spec_from_json(const Json& j) {
  TaskSpec s;
  try {
    s.family = parse_task_family(j.value("family", std::string("majority")));
    s.name = j.value("name", std::string(task_family_name(s.family)));
    if (s.family == TaskFamily::Containment) s.num_classes = 2;
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    s.seq_len = j.value("seq_len", s.seq_len);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.train_size = j.value("train_size", s.train_size);
    s.val_size = j.value("val_size", s.val_size);
    s.test_size = j.value("test_size", s.test_size);
    s.seed = j.value("seed", s.seed);
    s.first_token = j.value("first_token", s.first_token);
    s.filler_start = j.value("filler_start", s.filler_start);
    s.pattern_len = j.value("pattern_len", s.pattern_len);
    s.distractor_token = j.value("distractor_token", s.distractor_token);
    s.num_distractors = j.value("num_distractors", s.num_distractors);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad task spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<std::string> task_label_names(const TaskSpec& spec) {
  if (spec.family == TaskFamily::Containment) return {"false", "true"};
  if (spec.family == TaskFamily::Majority && spec.num_classes == 2) return {"negative", "positive"};
  std::vector<std::string> out;
  for (std::size_t c = 0; c < spec.num_classes; ++c) out.push_back("class_" + std::to_string(c));
  return out;
}

std::size_t unified_label(std::string_view name) {
  if (name == "negative" || name == "not_entailment" || name == "false") return 0;
  if (name == "positive" || name == "entailment" || name == "true") return 1;
  if (name.substr(0, 6) == "class_") {
    try {
      return std::stoul(std::string(name.substr(6)));
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("label '" + std::string(name) + "' has no unified mapping");
}

std::size_t TaskSpec::reserved_tokens() const {
  switch (family) {
    case TaskFamily::Majority:
      return num_classes;
    case TaskFamily::Containment:
      return pattern_len;
    case TaskFamily::ModSum:
      return 0;
  }
  return 0;
}

double random_baseline(const TaskSpec& spec) { return 1.0 / static_cast<double>(spec.num_classes); }

namespace {

using Token = std::uint32_t;

class Generator {
 public:
  explicit Generator(const TaskSpec& spec) : s_(spec), rng_(spec.seed) {}

  TokenSeq example(std::size_t label) {
    switch (s_.family) {
      case TaskFamily::Majority:
        return majority(label);
      case TaskFamily::Containment:
        return containment(label);
      case TaskFamily::ModSum:
        return modsum(label);
    }
    return {};
  }

  Rng& rng() { return rng_; }

 private:
  Token filler() {
    std::uniform_int_distribution<std::size_t> dist(s_.filler_start, s_.vocab_size - 1);
    const std::size_t lo = s_.first_token, hi = s_.first_token + s_.reserved_tokens();
    const std::size_t dlo = s_.distractor_token, dhi = s_.distractor_token + s_.num_distractors;
    while (true) {
      const std::size_t t = dist(rng_);
      if ((t < lo || t >= hi) && (t < dlo || t >= dhi)) return static_cast<Token>(t);
    }
  }

  std::size_t uniform(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_);
  }

  TokenSeq majority(std::size_t label) {
    const std::size_t L = s_.seq_len;
    const std::size_t C = s_.num_classes;
    const std::size_t w_max = std::max<std::size_t>(2, std::min<std::size_t>(5, L));
    const std::size_t D = s_.num_distractors;
    std::vector<std::size_t> counts(C), extra(D);
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw GenerationError("majority counts do not fit in seq_len");
      const std::size_t w = uniform(2, w_max);
      std::size_t total = w;
      for (std::size_t c = 0; c < C; ++c) {
        counts[c] = c == label ? w : uniform(0, w - 1);
        if (c != label) total += counts[c];
      }
      for (auto& e : extra) {
        e = uniform(0, w_max);
        total += e;
      }
      if (total <= L) break;
    }
    TokenSeq seq;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < counts[c]; ++k) seq.push_back(static_cast<Token>(s_.first_token + c));
    for (std::size_t e = 0; e < D; ++e)
      for (std::size_t k = 0; k < extra[e]; ++k) seq.push_back(static_cast<Token>(s_.distractor_token + e));
    while (seq.size() < L) seq.push_back(filler());
    std::shuffle(seq.begin(), seq.end(), rng_);
    return seq;
  }

  TokenSeq containment(std::size_t label) {
    const std::size_t L = s_.seq_len;
    const std::size_t P = s_.pattern_len;
    TokenSeq seq(L);
    for (auto& t : seq) t = filler();
    if (label == 1) {
      const std::size_t at = uniform(0, L - P);
      for (std::size_t k = 0; k < P; ++k) seq[at + k] = static_cast<Token>(s_.first_token + k);
      return seq;
    }
    // An incomplete subset of the pattern tokens at scattered positions.
    std::vector<Token> pattern(P);
    std::iota(pattern.begin(), pattern.end(), s_.first_token);
    std::shuffle(pattern.begin(), pattern.end(), rng_);
    const std::size_t keep = uniform(0, P - 1);
    std::vector<std::size_t> pos(L);
    std::iota(pos.begin(), pos.end(), 0);
    std::shuffle(pos.begin(), pos.end(), rng_);
    for (std::size_t k = 0; k < keep; ++k) seq[pos[k]] = pattern[k];
    return seq;
  }

  TokenSeq modsum(std::size_t label) {
    const std::size_t L = s_.seq_len;
    const std::size_t C = s_.num_classes;
    TokenSeq seq(L);
    std::size_t sum = 0;
    for (std::size_t i = 0; i + 1 < L; ++i) {
      seq[i] = filler();
      sum += seq[i];
    }
    // Last token fixes the residue.
    const std::size_t need = (label + C - sum % C) % C;
    while (true) {
      const Token t = filler();
      if (t % C == need) {
        seq[L - 1] = t;
        break;
      }
    }
    std::shuffle(seq.begin(), seq.end(), rng_);
    return seq;
  }

  const TaskSpec& s_;
  Rng rng_;
};

}  // namespace

SyntheticTask gen_task(const TaskSpec& spec) {
  spec.validate();
  SyntheticTask task;
  task.spec = spec;
  task.label_names = task_label_names(spec);
  Generator gen(spec);
  std::set<TokenSeq> seen;

  auto fill = [&](Dataset& d, std::size_t n) {
    std::vector<std::size_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % spec.num_classes;
    std::shuffle(labels.begin(), labels.end(), gen.rng());
    for (auto y : labels) {
      bool placed = false;
      for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        TokenSeq x = gen.example(y);
        if (seen.insert(x).second) {
          d.inputs.push_back(std::move(x));
          d.labels.push_back(y);
          placed = true;
        }
      }
      if (!placed) throw GenerationError("could not generate enough distinct examples for task '" + spec.name + "'");
    }
  };
  fill(task.train, spec.train_size);
  fill(task.val, spec.val_size);
  fill(task.test, spec.test_size);
  return task;
}

std::uint64_t SyntheticTask::hash() const {
  std::uint64_t h = fnv1a64(task_spec_to_json(spec).dump());
  for (const Dataset* d : {&train, &val, &test}) {
    for (std::size_t i = 0; i < d->size(); ++i) {
      h = fnv1a64(std::as_bytes(std::span(d->inputs[i])), h);
      const std::uint64_t y = d->labels[i];
      h = fnv1a64(std::as_bytes(std::span(&y, 1)), h);
    }
  }
  return h;
}

std::vector<std::size_t> SyntheticTask::unified_labels() const {
  std::vector<std::size_t> out;
  for (const auto& n : label_names) out.push_back(unified_label(n));
  return out;
}

}  // namespace petlab
