#include "petlab/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>

#include "petlab/errors.hpp"
#include "petlab/seeding.hpp"

namespace petlab {

// ---------------------------------------------------------------- methods

std::string MethodSpec::structure(bool budgeted) const {
  switch (kind) {
    case MethodKind::FullFT:
      return "dense";
    case MethodKind::None:
      return "none";
    case MethodKind::Pet:
      return budgeted ? std::string(mask_mode_name(mode)) : "dense";
    case MethodKind::Apet:
      return std::string(mask_mode_name(mode));
  }
  return "?";
}

std::vector<std::string> MethodSpec::insertion_ops(const ModelConfig& cfg) const {
  std::vector<std::string> out;
  if (kind == MethodKind::Pet) {
    for (const auto& e : pet_layout(pet, cfg)) out.emplace_back(insertion_kind_name(e.op));
  } else if (kind == MethodKind::Apet) {
    for (const auto& e : layout.empty() ? default_apet_layout(cfg) : layout) {
      const std::string op(insertion_kind_name(e.op));
      if (std::find(out.begin(), out.end(), op) == out.end()) out.push_back(op);
    }
  }
  return out;
}

MethodSpec method_from_json(const Json& j, const ModelConfig& cfg) {
  MethodSpec m;
  const Json obj = j.is_string() ? Json{{"method", j.get<std::string>()}} : j;
  if (!obj.is_object()) throw ConfigError("method must be a name or an object");
  try {
    const std::string kind = obj.at("method").get<std::string>();
    m.name = obj.value("name", kind);
    if (kind == "ft") {
      m.kind = MethodKind::FullFT;
    } else if (kind == "none") {
      m.kind = MethodKind::None;
    } else if (kind == "apet-adjacent" || kind == "apet-discrete" || kind == "apet") {
      m.kind = MethodKind::Apet;
      m.mode = kind == "apet-adjacent" ? MaskMode::Adjacent : MaskMode::Discrete;
      if (obj.contains("mode")) m.mode = parse_mask_mode(obj.at("mode").get<std::string>());
      if (obj.contains("layout")) m.layout = layout_from_json(obj.at("layout"), cfg);
      else m.layout = default_apet_layout(cfg, obj.value("rank", kDefaultLoraRank), obj.value("alpha", kDefaultLoraAlpha));
    } else {
      m.kind = MethodKind::Pet;
      Json pj = obj;
      pj["kind"] = kind;
      m.pet = pet_config_from_json(pj);
      if (obj.contains("mode")) m.mode = parse_mask_mode(obj.at("mode").get<std::string>());
    }
    if (obj.contains("axis")) m.axis = parse_mask_axis(obj.at("axis").get<std::string>());
    if (obj.contains("learning_rate")) m.learning_rate = obj.at("learning_rate").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad method: ") + e.what());
  }
  if (m.learning_rate && !(*m.learning_rate > 0.0)) throw ConfigError("method learning_rate must be > 0");
  return m;
}

Json method_to_json(const MethodSpec& m) {
  Json j;
  j["name"] = m.name;
  switch (m.kind) {
    case MethodKind::FullFT:
      j["method"] = "ft";
      break;
    case MethodKind::None:
      j["method"] = "none";
      break;
    case MethodKind::Pet: {
      Json pj = pet_config_to_json(m.pet);
      j["method"] = pj["kind"];
      for (auto& [k, v] : pj.items()) {
        if (k != "kind") j[k] = v;
      }
      j["mode"] = mask_mode_name(m.mode);
      break;
    }
    case MethodKind::Apet:
      j["method"] = "apet";
      j["mode"] = mask_mode_name(m.mode);
      j["layout"] = layout_to_json(m.layout);
      break;
  }
  j["axis"] = mask_axis_name(m.axis);
  if (m.learning_rate) j["learning_rate"] = *m.learning_rate;
  return j;
}

LrPresets default_lr_presets() { return {{"prompt", 3e-2}}; }

ApetLayout pet_layout(const PetConfig& cfg, const ModelConfig& model) {
  cfg.validate();
  LayoutEntry e;
  e.sites = cfg.target_sites.empty() ? default_pet_sites(cfg.kind, model) : cfg.target_sites;
  switch (cfg.kind) {
    case PetKind::Prompt:
      e.op = InsertionKind::ConcatPrompt;
      e.sites.clear();
      e.prompt_len = cfg.prompt_len;
      break;
    case PetKind::BitFit:
      e.op = InsertionKind::Add;
      break;
    case PetKind::LoRA:
      e.op = InsertionKind::ConcatLowRank;
      e.rank = cfg.lora_rank;
      e.alpha = cfg.lora_alpha;
      break;
    case PetKind::Adapter:
      e.op = InsertionKind::PlugIn;
      e.rank = cfg.adapter_bottleneck;
      e.activation = cfg.adapter_activation;
      break;
  }
  return {e};
}

std::size_t method_capacity(const MethodSpec& m, const ModelConfig& model) {
  switch (m.kind) {
    case MethodKind::FullFT:
      return model.parameter_count();
    case MethodKind::None:
      return 0;
    case MethodKind::Pet:
      return layout_capacity(pet_layout(m.pet, model), model);
    case MethodKind::Apet:
      return layout_capacity(m.layout.empty() ? default_apet_layout(model) : m.layout, model);
  }
  return 0;
}

std::unique_ptr<TuningModule> build_module(Backbone& model, const MethodSpec& m, std::optional<std::size_t> budget,
                                           std::uint64_t seed, std::size_t input_len) {
  if (m.kind == MethodKind::FullFT) return std::make_unique<FullFineTune>(model);
  freeze_backbone(model);
  ApetOptions opts{m.mode, m.axis, seed, input_len};
  switch (m.kind) {
    case MethodKind::None:
      return std::make_unique<NoTuning>();
    case MethodKind::Pet:
      if (!budget) return std::make_unique<PetModule>(attach_pet(model, m.pet, seed, input_len));
      return std::make_unique<ApetModule>(build_apet(model, pet_layout(m.pet, model.config()), *budget, opts));
    case MethodKind::Apet:
      if (!budget) throw ConfigError("method '" + m.name + "' needs a budget");
      return std::make_unique<ApetModule>(
          build_apet(model, m.layout.empty() ? default_apet_layout(model.config()) : m.layout, *budget, opts));
    case MethodKind::FullFT:
      break;
  }
  throw ConfigError("unhandled method kind");
}

// ---------------------------------------------------------------- backbone

Json backbone_spec_to_json(const BackboneSpec& s) {
  Json j;
  j["model"] = model_config_to_json(s.model);
  j["seed"] = s.seed;
  if (!s.checkpoint.empty()) j["checkpoint"] = s.checkpoint;
  if (s.pretrain_task) {
    j["pretrain"] = {{"task", task_spec_to_json(*s.pretrain_task)}, {"train", train_config_to_json(s.pretrain)}};
  }
  return j;
}

BackboneSpec backbone_spec_from_json(const Json& j) {
  BackboneSpec s;
  try {
    if (j.contains("model")) s.model = model_config_from_json(j.at("model"));
    s.seed = j.value("seed", s.seed);
    s.checkpoint = j.value("checkpoint", std::string());
    if (j.contains("pretrain")) {
      const Json& p = j.at("pretrain");
      s.pretrain_task = task_spec_from_json(p.at("task"));
      s.pretrain = train_config_from_json(p.value("train", Json::object()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad backbone spec: ") + e.what());
  }
  s.model.validate();
  return s;
}

Backbone make_backbone(const BackboneSpec& spec) {
  if (!spec.checkpoint.empty()) {
    Backbone b = load_backbone(spec.checkpoint);
    if (!(b.config() == spec.model)) throw ConfigError("backbone checkpoint does not match the model config");
    freeze_backbone(b);
    return b;
  }
  Backbone b(spec.model, spec.seed);
  if (spec.pretrain_task) {
    if (spec.pretrain_task->num_classes != spec.model.num_classes) {
      throw ConfigError("pretrain task class count differs from the model");
    }
    const SyntheticTask task = gen_task(*spec.pretrain_task);
    FullFineTune ft(b);
    TrainConfig tc = spec.pretrain;
    tc.seed = mix_seed(spec.seed, 0x9e7a);
    // fixed length: no early stop
    ConvergenceCriterion crit{tc.max_steps + 1, 0.0};
    fit(b, ft, task, tc, crit);
  }
  freeze_backbone(b);
  return b;
}

// ---------------------------------------------------------------- runs

namespace {

std::string pad(std::size_t v, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, v);
  return buf;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for fewer than two values.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double learning_rate_for(const Context& ctx, const MethodSpec& m) {
  if (m.learning_rate) return *m.learning_rate;
  if (auto it = ctx.presets.find(m.name); it != ctx.presets.end()) return it->second;
  if (m.kind == MethodKind::Pet) {
    if (auto it = ctx.presets.find(std::string(pet_kind_name(m.pet.kind))); it != ctx.presets.end()) {
      return it->second;
    }
  }
  return ctx.train.learning_rate;
}

std::string method_kind_name(MethodKind k) {
  switch (k) {
    case MethodKind::FullFT:
      return "ft";
    case MethodKind::None:
      return "none";
    case MethodKind::Pet:
      return "pet";
    case MethodKind::Apet:
      return "apet";
  }
  return "?";
}

void check_failures(const Context& ctx, const std::vector<RunRecord>& runs) {
  if (ctx.on_runs) ctx.on_runs(runs);
  for (const auto& r : runs) {
    if (r.status == "config_error") throw ConfigError("run " + r.key + ": " + r.error);
  }
  for (const auto& r : runs) {
    if (r.status != "ok") throw NumericError("run " + r.key + ": " + r.error);
  }
}

}  // namespace

std::string RunSpec::key() const {
  std::string k = experiment + "/" + group + "/" + method.name + "/";
  k += budget ? pad(*budget, 10) : std::string("-");
  k += "/" + (task ? task->spec.name : std::string("?")) + "/" + pad(replicate, 3);
  return k;
}

Json run_record_to_json(const RunRecord& r) {
  Json j;
  j["key"] = r.key;
  j["experiment"] = r.experiment;
  j["group"] = r.group;
  j["method"] = r.method;
  j["method_kind"] = r.method_kind;
  j["structure"] = r.structure;
  j["insertion_ops"] = r.insertion_ops;
  j["budget"] = r.budget ? Json(*r.budget) : Json(nullptr);
  j["trainable_count"] = r.trainable_count;
  j["budget_ratio"] = r.budget_ratio;
  j["replicate"] = r.replicate;
  j["seed"] = r.run_seed;
  j["task"] = r.task;
  j["task_family"] = r.task_family;
  j["task_hash"] = r.task_hash;
  j["backbone_hash"] = r.backbone_hash;
  j["backbone_hash_after"] = r.backbone_hash_after;
  j["mask_hash"] = r.mask_hash;
  j["learning_rate"] = r.learning_rate;
  j["status"] = r.status;
  j["error"] = r.error;
  j["report"] = train_report_to_json(r.report);
  Json t = Json::object();
  for (const auto& [k, v] : r.transfer) t[k] = v;
  j["transfer"] = t;
  return j;
}

RunRecord run_record_from_json(const Json& j) {
  RunRecord r;
  try {
    r.key = j.at("key").get<std::string>();
    r.experiment = j.at("experiment").get<std::string>();
    r.group = j.at("group").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.method_kind = j.at("method_kind").get<std::string>();
    r.structure = j.at("structure").get<std::string>();
    r.insertion_ops = j.at("insertion_ops").get<std::vector<std::string>>();
    if (!j.at("budget").is_null()) r.budget = j.at("budget").get<std::size_t>();
    r.trainable_count = j.at("trainable_count").get<std::size_t>();
    r.budget_ratio = j.at("budget_ratio").get<double>();
    r.replicate = j.at("replicate").get<std::size_t>();
    r.run_seed = j.at("seed").get<std::uint64_t>();
    r.task = j.at("task").get<std::string>();
    r.task_family = j.at("task_family").get<std::string>();
    r.task_hash = j.at("task_hash").get<std::string>();
    r.backbone_hash = j.at("backbone_hash").get<std::string>();
    r.backbone_hash_after = j.at("backbone_hash_after").get<std::string>();
    r.mask_hash = j.at("mask_hash").get<std::string>();
    r.learning_rate = j.at("learning_rate").get<double>();
    r.status = j.at("status").get<std::string>();
    r.error = j.at("error").get<std::string>();
    r.report = train_report_from_json(j.at("report"));
    for (const auto& [k, v] : j.at("transfer").items()) r.transfer[k] = v.get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad run record: ") + e.what());
  }
  return r;
}

RunRecord run_cell(const Context& ctx, const RunSpec& spec) {
  if (!ctx.backbone) throw UsageError("context has no backbone");
  if (!spec.task) throw UsageError("run has no task");
  const ModelConfig& mc = ctx.backbone->config();
  RunRecord rec;
  rec.key = spec.key();
  rec.experiment = spec.experiment;
  rec.group = spec.group;
  rec.method = spec.method.name;
  rec.method_kind = method_kind_name(spec.method.kind);
  rec.budget = spec.budget;
  rec.structure = spec.method.structure(spec.budget.has_value());
  rec.replicate = spec.replicate;
  rec.run_seed = mix_seed(ctx.seed, fnv1a64(rec.key));
  rec.task = spec.task->spec.name;
  rec.task_family = std::string(task_family_name(spec.task->spec.family));
  rec.task_hash = hex64(spec.task->hash());
  rec.learning_rate = learning_rate_for(ctx, spec.method);
  try {
    rec.insertion_ops = spec.method.insertion_ops(mc);
    Backbone model = ctx.backbone->clone();
    rec.backbone_hash = hex64(model.hash());
    auto module = build_module(model, spec.method, spec.budget, mix_seed(rec.run_seed, 1), spec.task->spec.seq_len);
    rec.trainable_count = module->trainable_count();
    rec.budget_ratio = static_cast<double>(rec.trainable_count) / static_cast<double>(mc.parameter_count());
    if (const auto* ap = dynamic_cast<const ApetModule*>(module.get())) rec.mask_hash = hex64(ap->mask_hash());
    TrainConfig tc = ctx.train;
    tc.seed = mix_seed(rec.run_seed, 2);
    tc.learning_rate = rec.learning_rate;
    rec.report = fit(model, *module, *spec.task, tc, ctx.criterion);
    rec.backbone_hash_after = hex64(model.hash());
    for (const SyntheticTask* t : spec.eval_tasks) {
      rec.transfer[t->spec.name] = evaluate(model, *module, t->test, tc.eval_batch).accuracy;
    }
  } catch (const ConfigError& e) {
    rec.status = "config_error";
    rec.error = e.what();
  } catch (const BudgetError& e) {
    rec.status = "config_error";
    rec.error = e.what();
  } catch (const std::exception& e) {
    rec.status = "error";
    rec.error = e.what();
  }
  return rec;
}

std::vector<RunRecord> run_cells(const Context& ctx, const std::vector<RunSpec>& specs) {
  std::vector<RunRecord> out(specs.size());
  const auto n = static_cast<std::ptrdiff_t>(specs.size());
#ifdef PETLAB_HAVE_OPENMP
  const int jobs = static_cast<int>(std::max<std::size_t>(1, ctx.jobs));
#pragma omp parallel for schedule(dynamic) num_threads(jobs) if (jobs > 1)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = run_cell(ctx, specs[i]);
#else
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = run_cell(ctx, specs[i]);
#endif
  std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) { return a.key < b.key; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].key == out[i - 1].key) throw ConfigError("duplicate run key " + out[i].key);
  }
  return out;
}

// ---------------------------------------------------------------- thresholds

std::pair<std::optional<std::size_t>, std::optional<std::size_t>> detect_thresholds(
    const std::vector<CurveRow>& curve, double random_baseline, double ft_performance, double margin,
    double epsilon) {
  if (curve.empty()) throw UsageError("detect_thresholds on an empty curve");
  std::optional<std::size_t> low, high;
  for (const auto& row : curve) {
    if (!row.feasible || row.n == 0) continue;
    if (!low && row.mean >= random_baseline + margin) low = row.budget;
    if (!high && row.mean >= ft_performance - epsilon) high = row.budget;
  }
  // Reaching FT also exceeds random.
  if (high && (!low || *low > *high)) low = high;
  return {low, high};
}

Json threshold_report_to_json(const ThresholdReport& t) {
  Json j;
  j["method"] = t.method;
  j["low_threshold"] = t.low_threshold ? Json(*t.low_threshold) : Json(nullptr);
  j["high_threshold"] = t.high_threshold ? Json(*t.high_threshold) : Json(nullptr);
  auto ratio_of = [&](const std::optional<std::size_t>& b) -> Json {
    if (!b) return nullptr;
    for (const auto& r : t.curve) {
      if (r.budget == *b) return r.ratio;
    }
    return nullptr;
  };
  j["low_threshold_ratio"] = ratio_of(t.low_threshold);
  j["high_threshold_ratio"] = ratio_of(t.high_threshold);
  j["random_baseline"] = t.random_baseline;
  j["ft_performance"] = t.ft_performance;
  Json curve = Json::array();
  for (const auto& r : t.curve) {
    curve.push_back({{"budget", r.budget},
                     {"ratio", r.ratio},
                     {"mean", r.mean},
                     {"std", r.std},
                     {"n", r.n},
                     {"feasible", r.feasible}});
  }
  j["curve"] = curve;
  return j;
}

// ---------------------------------------------------------------- drivers

TrainResult run_train(const Context& ctx, const TrainSpec& spec) {
  if (spec.seeds < 1) throw ConfigError("seeds must be >= 1");
  const SyntheticTask task = gen_task(spec.task);
  std::vector<RunSpec> specs;
  for (std::size_t s = 0; s < spec.seeds; ++s) specs.push_back({"train", "", spec.method, spec.budget, s, &task, {}});
  TrainResult out{run_cells(ctx, specs)};
  check_failures(ctx, out.runs);
  return out;
}

void SweepSpec::validate() const {
  if (seeds < 1) throw ConfigError("sweep seeds must be >= 1");
  if (budgets.empty()) throw ConfigError("sweep budget grid is empty");
  for (std::size_t i = 1; i < budgets.size(); ++i) {
    if (budgets[i] <= budgets[i - 1]) throw ConfigError("sweep budget grid must be strictly ascending");
  }
  if (methods.empty()) throw ConfigError("sweep has no methods");
  std::set<std::string> names;
  for (const auto& m : methods) {
    if (!names.insert(m.name).second) throw ConfigError("duplicate method name '" + m.name + "'");
  }
  if (!(margin >= 0.0) || !(epsilon >= 0.0)) throw ConfigError("margin and epsilon must be >= 0");
}

std::vector<std::size_t> geometric_budgets(std::size_t start, double factor, std::size_t cap, bool include_zero) {
  if (start == 0 || !(factor > 1.0)) throw ConfigError("geometric grid needs start >= 1 and factor > 1");
  std::vector<std::size_t> out;
  if (include_zero) out.push_back(0);
  double b = static_cast<double>(start);
  while (static_cast<std::size_t>(std::llround(b)) < cap) {
    const auto v = static_cast<std::size_t>(std::llround(b));
    if (out.empty() || v > out.back()) out.push_back(v);
    b *= factor;
  }
  if (out.empty() || out.back() != cap) out.push_back(cap);
  return out;
}

SweepResult run_budget_sweep(const Context& ctx, const SweepSpec& spec) {
  spec.validate();
  const ModelConfig& mc = ctx.backbone->config();
  const SyntheticTask task = gen_task(spec.task);
  if (task.spec.num_classes != mc.num_classes) throw ConfigError("task class count differs from the model");

  std::vector<MethodSpec> budgeted, references;
  for (const auto& m : spec.methods) {
    (m.kind == MethodKind::Pet || m.kind == MethodKind::Apet ? budgeted : references).push_back(m);
  }
  const bool has_ft = std::any_of(references.begin(), references.end(),
                                  [](const MethodSpec& m) { return m.kind == MethodKind::FullFT; });
  if (!spec.ft_reference && !has_ft) {
    MethodSpec ft;
    ft.name = "ft";
    ft.kind = MethodKind::FullFT;
    references.push_back(ft);
  }

  std::vector<RunSpec> specs;
  for (const auto& m : references) {
    for (std::size_t s = 0; s < spec.seeds; ++s) specs.push_back({"sweep", "reference", m, std::nullopt, s, &task, {}});
  }
  for (const auto& m : budgeted) {
    const std::size_t cap = method_capacity(m, mc);
    for (auto b : spec.budgets) {
      if (b > cap) continue;
      for (std::size_t s = 0; s < spec.seeds; ++s) specs.push_back({"sweep", "budget", m, b, s, &task, {}});
    }
  }

  SweepResult out;
  out.runs = run_cells(ctx, specs);
  check_failures(ctx, out.runs);
  out.random_baseline = random_baseline(task.spec);

  if (spec.ft_reference) {
    out.ft_performance = *spec.ft_reference;
  } else {
    std::vector<double> ft;
    for (const auto& r : out.runs) {
      if (r.method_kind == "ft") ft.push_back(r.report.final_metric);
    }
    out.ft_performance = mean_of(ft);
  }

  for (const auto& m : budgeted) {
    ThresholdReport t;
    t.method = m.name;
    t.random_baseline = out.random_baseline;
    t.ft_performance = out.ft_performance;
    const std::size_t cap = method_capacity(m, mc);
    for (auto b : spec.budgets) {
      CurveRow row;
      row.budget = b;
      row.ratio = static_cast<double>(b) / static_cast<double>(mc.parameter_count());
      row.feasible = b <= cap;
      std::vector<double> acc;
      for (const auto& r : out.runs) {
        if (r.group == "budget" && r.method == m.name && r.budget == b) acc.push_back(r.report.final_metric);
      }
      row.n = acc.size();
      row.mean = mean_of(acc);
      row.std = std_of(acc);
      t.curve.push_back(row);
    }
    std::tie(t.low_threshold, t.high_threshold) =
        detect_thresholds(t.curve, out.random_baseline, out.ft_performance, spec.margin, spec.epsilon);
    out.thresholds.push_back(std::move(t));
  }
  return out;
}

AblationResult run_structure_ablation(const Context& ctx, const AblationSpec& spec) {
  if (spec.seeds < 1) throw ConfigError("ablation seeds must be >= 1");
  if (spec.structures.empty()) throw ConfigError("ablation has no structures");
  const ModelConfig& mc = ctx.backbone->config();
  std::set<std::string> names;
  for (const auto& m : spec.structures) {
    if (m.kind != MethodKind::Pet && m.kind != MethodKind::Apet) {
      throw ConfigError("ablation structure '" + m.name + "' has no budget");
    }
    if (!names.insert(m.name).second) throw ConfigError("duplicate structure name '" + m.name + "'");
    const std::size_t cap = method_capacity(m, mc);
    if (spec.budget > cap) {
      throw BudgetError("structure '" + m.name + "' can host " + std::to_string(cap) + " parameters, not " +
                        std::to_string(spec.budget));
    }
  }
  const SyntheticTask task = gen_task(spec.task);
  const std::string group = "N=" + std::to_string(spec.budget);
  std::vector<RunSpec> specs;
  for (const auto& m : spec.structures) {
    for (std::size_t s = 0; s < spec.seeds; ++s) specs.push_back({"ablate", group, m, spec.budget, s, &task, {}});
  }
  AblationResult out;
  out.runs = run_cells(ctx, specs);
  check_failures(ctx, out.runs);
  for (const auto& r : out.runs) {
    if (r.trainable_count != spec.budget) throw BudgetError("run " + r.key + " trains a different parameter count");
  }
  for (const auto& m : spec.structures) {
    AblationRow row;
    row.method = m.name;
    row.structure = m.structure(true);
    row.budget = spec.budget;
    std::vector<double> acc, steps;
    for (const auto& r : out.runs) {
      if (r.method != m.name) continue;
      acc.push_back(r.report.final_metric);
      if (r.report.steps_to_convergence) steps.push_back(static_cast<double>(*r.report.steps_to_convergence));
    }
    row.n = acc.size();
    row.mean = mean_of(acc);
    row.std = std_of(acc);
    row.converged = steps.size();
    row.steps_mean = mean_of(steps);
    row.steps_std = std_of(steps);
    out.rows.push_back(row);
  }
  return out;
}

TransferResult run_transfer(const Context& ctx, const TransferSpec& spec) {
  if (spec.seeds < 1) throw ConfigError("transfer seeds must be >= 1");
  if (spec.sources.empty() || spec.targets.empty()) throw ConfigError("transfer needs source and target tasks");
  const ModelConfig& mc = ctx.backbone->config();

  // Generate each distinct task once.
  std::map<std::string, SyntheticTask> tasks;
  auto add = [&](const TaskSpec& t) {
    auto it = tasks.find(t.name);
    if (it == tasks.end()) {
      tasks.emplace(t.name, gen_task(t));
    } else if (task_spec_to_json(it->second.spec) != task_spec_to_json(t)) {
      throw ConfigError("two different tasks are named '" + t.name + "'");
    }
  };
  for (const auto& t : spec.sources) add(t);
  for (const auto& t : spec.targets) add(t);

  const auto& first = tasks.at(spec.sources.front().name);
  const auto labels = first.unified_labels();
  for (const auto& [name, t] : tasks) {
    if (t.spec.num_classes != mc.num_classes) throw ConfigError("task '" + name + "' class count differs from the model");
    if (t.unified_labels() != labels) throw ConfigError("task '" + name + "' uses a different label space");
  }

  std::vector<const SyntheticTask*> targets;
  for (const auto& t : spec.targets) targets.push_back(&tasks.at(t.name));
  std::vector<RunSpec> specs;
  for (const auto& s : spec.sources) {
    for (std::size_t r = 0; r < spec.seeds; ++r) {
      specs.push_back({"transfer", "source", spec.method, spec.budget, r, &tasks.at(s.name), targets});
    }
  }
  TransferResult out;
  out.runs = run_cells(ctx, specs);
  check_failures(ctx, out.runs);

  TransferMatrix& m = out.matrix;
  for (const auto& t : spec.targets) {
    m.targets.push_back(t.name);
    m.target_families.emplace_back(task_family_name(t.family));
  }
  std::vector<double> same, cross;
  for (const auto& s : spec.sources) {
    m.sources.push_back(s.name);
    m.source_families.emplace_back(task_family_name(s.family));
    std::vector<std::vector<double>> rel(spec.targets.size());
    std::vector<double> orig;
    for (const auto& r : out.runs) {
      if (r.task != s.name) continue;
      // The source's own test accuracy is the reference.
      const double base = r.report.final_metric;
      orig.push_back(base);
      for (std::size_t k = 0; k < spec.targets.size(); ++k) {
        const std::string& tn = spec.targets[k].name;
        if (tn == s.name) {
          rel[k].push_back(1.0);
        } else {
          if (!(base > 0.0)) throw NumericError("source task '" + s.name + "' has zero accuracy");
          rel[k].push_back(r.transfer.at(tn) / base);
        }
      }
    }
    std::vector<double> row;
    for (std::size_t k = 0; k < spec.targets.size(); ++k) {
      row.push_back(mean_of(rel[k]));
      if (spec.targets[k].name == s.name) continue;
      (spec.targets[k].family == s.family ? same : cross).push_back(row.back());
    }
    m.relative.push_back(row);
    m.original.push_back(mean_of(orig));
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  m.same_family_mean = same.empty() ? nan : mean_of(same);
  m.cross_family_mean = cross.empty() ? nan : mean_of(cross);
  return out;
}

}  // namespace petlab
