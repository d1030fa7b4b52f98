#include "petlab/config.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "petlab/errors.hpp"

namespace petlab {

std::size_t parse_budget(const Json& j, const ModelConfig& cfg) {
  if (j.is_number_unsigned()) return j.get<std::size_t>();
  if (j.is_number_integer()) {
    if (j.get<long long>() < 0) throw ConfigError("budget must be >= 0");
    return j.get<std::size_t>();
  }
  if (j.is_string()) {
    PetConfig pc;
    pc.kind = parse_pet_kind(j.get<std::string>());
    return pet_parameter_count(pc, cfg);
  }
  if (j.is_object() && j.contains("ratio")) {
    const double r = j.at("ratio").get<double>();
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("budget ratio must lie in [0, 1]");
    return static_cast<std::size_t>(std::floor(r * static_cast<double>(cfg.parameter_count())));
  }
  throw ConfigError("budget must be an integer, a method name or {\"ratio\": r}");
}

namespace {

std::vector<MethodSpec> parse_methods(const Json& j, const ModelConfig& cfg) {
  if (!j.is_array() || j.empty()) throw ConfigError("methods must be a non-empty array");
  std::vector<MethodSpec> out;
  for (const auto& m : j) out.push_back(method_from_json(m, cfg));
  return out;
}

std::vector<std::size_t> parse_budget_grid(const Json& j, const ModelConfig& cfg, const std::vector<MethodSpec>& methods) {
  if (j.is_array()) {
    std::vector<std::size_t> out;
    for (const auto& b : j) out.push_back(parse_budget(b, cfg));
    return out;
  }
  if (j.is_object() && j.contains("geometric")) {
    const Json& g = j.at("geometric");
    std::size_t cap = 0;
    if (!g.contains("cap") || g.at("cap") == "capacity") {
      for (const auto& m : methods) {
        if (m.kind == MethodKind::Pet || m.kind == MethodKind::Apet) cap = std::max(cap, method_capacity(m, cfg));
      }
    } else {
      cap = parse_budget(g.at("cap"), cfg);
    }
    return geometric_budgets(g.value("start", std::size_t{8}), g.value("factor", 2.0), cap,
                             g.value("include_zero", true));
  }
  throw ConfigError("budgets must be an array or {\"geometric\": {...}}");
}

TaskSpec parse_task(const Json& j, const ModelConfig& cfg) {
  Json t = j;
  if (!t.contains("num_classes") && t.value("family", std::string("majority")) != "containment") {
    t["num_classes"] = cfg.num_classes;
  }
  return task_spec_from_json(t);
}

void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

}  // namespace

ExperimentConfig parse_config(const Json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(j,
             {"model", "backbone", "task", "train", "convergence", "presets", "seed", "jobs", "method", "budget",
              "seeds", "sweep", "ablate", "transfer", "gradcheck", "description"},
             "config");
  ExperimentConfig c;
  try {
    Json bb = j.value("backbone", Json::object());
    if (j.contains("model")) bb["model"] = j.at("model");
    c.backbone = backbone_spec_from_json(bb);
    const ModelConfig& mc = c.backbone.model;

    c.task = parse_task(j.value("task", Json::object()), mc);
    c.train = train_config_from_json(j.value("train", Json::object()));
    if (j.contains("convergence")) {
      const Json& cv = j.at("convergence");
      c.convergence.patience = cv.value("patience", c.convergence.patience);
      c.convergence.min_delta = cv.value("min_delta", c.convergence.min_delta);
    }
    c.convergence.validate();
    if (j.contains("presets")) {
      for (const auto& [k, v] : j.at("presets").items()) {
        const double lr = v.is_object() ? v.at("learning_rate").get<double>() : v.get<double>();
        if (!(lr > 0.0)) throw ConfigError("preset learning rate must be > 0");
        c.presets[k] = lr;
      }
    }
    c.seed = j.value("seed", c.seed);
    c.jobs = j.value("jobs", c.jobs);
    if (c.jobs < 1) throw ConfigError("jobs must be >= 1");

    if (j.contains("method")) {
      TrainSpec t;
      t.method = method_from_json(j.at("method"), mc);
      if (j.contains("budget") && !j.at("budget").is_null()) t.budget = parse_budget(j.at("budget"), mc);
      t.seeds = j.value("seeds", std::size_t{1});
      t.task = c.task;
      c.single = t;
    }

    if (j.contains("sweep")) {
      const Json& s = j.at("sweep");
      check_keys(s, {"methods", "budgets", "seeds", "ft_reference", "margin", "epsilon", "task"}, "sweep");
      SweepSpec sw;
      sw.methods = parse_methods(s.at("methods"), mc);
      sw.budgets = parse_budget_grid(s.at("budgets"), mc, sw.methods);
      sw.seeds = s.value("seeds", sw.seeds);
      sw.task = s.contains("task") ? parse_task(s.at("task"), mc) : c.task;
      if (s.contains("ft_reference") && s.at("ft_reference") != "compute") {
        sw.ft_reference = s.at("ft_reference").get<double>();
      }
      sw.margin = s.value("margin", sw.margin);
      sw.epsilon = s.value("epsilon", sw.epsilon);
      sw.validate();
      c.sweep = sw;
    }

    if (j.contains("ablate")) {
      const Json& a = j.at("ablate");
      check_keys(a, {"budget", "structures", "seeds", "task"}, "ablate");
      AblationSpec ab;
      ab.budget = parse_budget(a.at("budget"), mc);
      const Json structures = a.value("structures", Json::array({"apet-adjacent", "apet-discrete"}));
      ab.structures = parse_methods(structures, mc);
      ab.seeds = a.value("seeds", ab.seeds);
      ab.task = a.contains("task") ? parse_task(a.at("task"), mc) : c.task;
      c.ablate = ab;
    }

    if (j.contains("transfer")) {
      const Json& t = j.at("transfer");
      check_keys(t, {"sources", "targets", "method", "budget", "seeds"}, "transfer");
      TransferSpec tr;
      for (const auto& s : t.at("sources")) tr.sources.push_back(parse_task(s, mc));
      if (t.contains("targets")) {
        for (const auto& s : t.at("targets")) tr.targets.push_back(parse_task(s, mc));
      } else {
        tr.targets = tr.sources;
      }
      tr.method = method_from_json(t.value("method", Json("lora")), mc);
      if (t.contains("budget") && !t.at("budget").is_null()) tr.budget = parse_budget(t.at("budget"), mc);
      tr.seeds = t.value("seeds", tr.seeds);
      c.transfer = tr;
    }

    if (j.contains("gradcheck")) {
      const Json& g = j.at("gradcheck");
      c.gradcheck.rounds = g.value("rounds", c.gradcheck.rounds);
      c.gradcheck.tolerance = g.value("tolerance", c.gradcheck.tolerance);
      if (c.gradcheck.rounds < 1 || !(c.gradcheck.tolerance > 0.0)) throw ConfigError("bad gradcheck settings");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_json_file(path)); }

}  // namespace petlab
