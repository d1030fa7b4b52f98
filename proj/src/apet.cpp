#include "petlab/apet.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include "petlab/errors.hpp"
#include "petlab/ops.hpp"
#include "petlab/seeding.hpp"

namespace petlab {

MaskMode parse_mask_mode(std::string_view name) {
  if (name == "adjacent") return MaskMode::Adjacent;
  if (name == "discrete") return MaskMode::Discrete;
  throw ConfigError("unknown mask mode '" + std::string(name) + "'");
}

std::string_view mask_mode_name(MaskMode mode) { return mode == MaskMode::Adjacent ? "adjacent" : "discrete"; }

MaskAxis parse_mask_axis(std::string_view name) {
  if (name == "rows") return MaskAxis::Rows;
  if (name == "columns") return MaskAxis::Columns;
  throw ConfigError("unknown mask axis '" + std::string(name) + "'");
}

std::string_view mask_axis_name(MaskAxis axis) { return axis == MaskAxis::Rows ? "rows" : "columns"; }

void MaskSpec::validate() const {
  if (rows == 0 || cols == 0) throw ConfigError("mask host shape must be non-empty");
  if (budget > rows * cols) {
    throw BudgetError("mask budget " + std::to_string(budget) + " exceeds host capacity " +
                      std::to_string(rows * cols));
  }
}

Tensor gen_adjacent_mask(const MaskSpec& spec) {
  spec.validate();
  const bool by_rows = spec.axis == MaskAxis::Rows;
  const std::size_t lines = by_rows ? spec.rows : spec.cols;
  const std::size_t line_len = by_rows ? spec.cols : spec.rows;
  const std::size_t full = spec.budget / line_len;
  const std::size_t rem = spec.budget % line_len;
  const std::size_t used = full + (rem > 0 ? 1 : 0);

  Rng rng(spec.seed);
  std::uniform_int_distribution<std::size_t> start_dist(0, lines - used);
  const std::size_t start = used == 0 ? 0 : start_dist(rng);
  std::size_t offset = 0;
  if (rem > 0) offset = std::uniform_int_distribution<std::size_t>(0, line_len - rem)(rng);

  std::vector<double> m(spec.rows * spec.cols, 0.0);
  auto set = [&](std::size_t line, std::size_t pos) {
    const std::size_t r = by_rows ? line : pos;
    const std::size_t c = by_rows ? pos : line;
    m[r * spec.cols + c] = 1.0;
  };
  for (std::size_t l = 0; l < full; ++l)
    for (std::size_t p = 0; p < line_len; ++p) set(start + l, p);
  for (std::size_t p = 0; p < rem; ++p) set(start + full, offset + p);
  return Tensor::from({spec.rows, spec.cols}, std::move(m));
}

Tensor gen_discrete_mask(const MaskSpec& spec) {
  spec.validate();
  const std::size_t total = spec.rows * spec.cols;
  std::vector<std::size_t> cells(total);
  std::iota(cells.begin(), cells.end(), 0);
  Rng rng(spec.seed);
  // partial Fisher-Yates: the first `budget` slots are a uniform sample
  for (std::size_t i = 0; i < spec.budget; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(cells[i], cells[pick(rng)]);
  }
  std::vector<double> m(total, 0.0);
  for (std::size_t i = 0; i < spec.budget; ++i) m[cells[i]] = 1.0;
  return Tensor::from({spec.rows, spec.cols}, std::move(m));
}

Tensor gen_mask(const MaskSpec& spec) {
  return spec.mode == MaskMode::Adjacent ? gen_adjacent_mask(spec) : gen_discrete_mask(spec);
}

InsertionKind parse_insertion_kind(std::string_view name) {
  if (name == "add") return InsertionKind::Add;
  if (name == "concat_prompt") return InsertionKind::ConcatPrompt;
  if (name == "concat_lowrank") return InsertionKind::ConcatLowRank;
  if (name == "plugin") return InsertionKind::PlugIn;
  throw ConfigError("unknown insertion op '" + std::string(name) + "'");
}

std::string_view insertion_kind_name(InsertionKind kind) {
  switch (kind) {
    case InsertionKind::Add:
      return "add";
    case InsertionKind::ConcatPrompt:
      return "concat_prompt";
    case InsertionKind::ConcatLowRank:
      return "concat_lowrank";
    case InsertionKind::PlugIn:
      return "plugin";
  }
  return "?";
}

// ---------------------------------------------------------------- budget

std::size_t BudgetPlan::capacity() const {
  std::size_t c = 0;
  for (const auto& a : allocations) c += shape_size(a.host_shape);
  return c;
}

void BudgetPlan::validate() const {
  std::size_t sum = 0;
  for (const auto& a : allocations) {
    if (a.count > shape_size(a.host_shape)) {
      throw BudgetError("allocation for '" + a.name + "' exceeds its host capacity");
    }
    sum += a.count;
  }
  if (sum != total) throw BudgetError("budget plan counts do not sum to the total");
}

BudgetPlan budget_allocate(std::size_t total, const std::vector<BudgetSite>& sites) {
  BudgetPlan plan;
  plan.total = total;
  std::size_t capacity = 0;
  for (const auto& s : sites) {
    plan.allocations.push_back({s.name, s.host_shape, 0});
    capacity += shape_size(s.host_shape);
  }
  if (total > capacity) {
    throw BudgetError("budget " + std::to_string(total) + " exceeds total capacity " + std::to_string(capacity));
  }
  if (total == 0) return plan;

  // Exact integer quotas: total * cap_k = q_k * capacity + r_k.
  std::vector<std::pair<unsigned __int128, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < sites.size(); ++k) {
    const unsigned __int128 prod = static_cast<unsigned __int128>(total) * shape_size(sites[k].host_shape);
    plan.allocations[k].count = static_cast<std::size_t>(prod / capacity);
    assigned += plan.allocations[k].count;
    remainders.push_back({prod % capacity, k});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < total; ++i) {
    ++plan.allocations[remainders[i].second].count;
    ++assigned;
  }
  plan.validate();
  return plan;
}

Json budget_plan_to_json(const BudgetPlan& plan) {
  Json j;
  j["total"] = plan.total;
  Json arr = Json::array();
  for (const auto& a : plan.allocations) {
    arr.push_back({{"site", a.name}, {"host_shape", a.host_shape}, {"count", a.count}});
  }
  j["allocations"] = arr;
  return j;
}

BudgetPlan budget_plan_from_json(const Json& j) {
  BudgetPlan plan;
  try {
    plan.total = j.at("total").get<std::size_t>();
    for (const auto& a : j.at("allocations")) {
      plan.allocations.push_back(
          {a.at("site").get<std::string>(), a.at("host_shape").get<Shape>(), a.at("count").get<std::size_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad budget plan: ") + e.what());
  }
  plan.validate();
  return plan;
}

Json mask_spec_to_json(const MaskSpec& spec) {
  Json j;
  j["mode"] = mask_mode_name(spec.mode);
  j["host_shape"] = {spec.rows, spec.cols};
  j["budget"] = spec.budget;
  j["seed"] = spec.seed;
  j["adjacent_axis"] = mask_axis_name(spec.axis);
  return j;
}

MaskSpec mask_spec_from_json(const Json& j) {
  MaskSpec spec;
  try {
    spec.mode = parse_mask_mode(j.at("mode").get<std::string>());
    const auto shape = j.at("host_shape").get<Shape>();
    if (shape.size() != 2) throw ConfigError("mask host_shape must have two entries");
    spec.rows = shape[0];
    spec.cols = shape[1];
    spec.budget = j.at("budget").get<std::size_t>();
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.axis = parse_mask_axis(j.value("adjacent_axis", std::string("rows")));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad mask spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------- insertions

DeltaFn apet_add(const MaskedWeight& offset, std::size_t width) {
  if (offset.weight().rows() != 1 || offset.weight().cols() != width) {
    throw ConfigError("add insertion needs a 1x" + std::to_string(width) + " offset, got " +
                      shape_str(offset.weight().shape()));
  }
  return [offset](const Tensor&, const Tensor& f_out) {
    if (f_out.cols() != offset.weight().cols()) throw ConfigError("add insertion width mismatch at site");
    return row_offset_delta(offset.effective(), f_out);
  };
}

PrefixFn apet_concatenate_prompt(const MaskedWeight& prompt) {
  return [prompt] { return prompt.effective(); };
}

DeltaFn apet_concatenate_lowrank(const MaskedWeight& down, const MaskedWeight& up, double alpha) {
  const auto& d = down.weight();
  const auto& u = up.weight();
  if (d.shape().size() != 2 || u.shape().size() != 2 || d.cols() != u.rows() || d.rows() != u.cols()) {
    throw ConfigError("low-rank insertion needs d x r and r x d weights, got " + shape_str(d.shape()) + " and " +
                      shape_str(u.shape()));
  }
  return [down, up, alpha](const Tensor& h_in, const Tensor&) {
    if (h_in.cols() != down.weight().rows()) throw ConfigError("low-rank insertion width mismatch at site");
    return lowrank_delta(h_in, down.effective(), up.effective(), alpha);
  };
}

DeltaFn apet_plugin(const MaskedWeight& down, const MaskedWeight& up, Activation act) {
  const auto& d = down.weight();
  const auto& u = up.weight();
  if (d.shape().size() != 2 || u.shape().size() != 2 || d.cols() != u.rows() || d.rows() != u.cols()) {
    throw ConfigError("plug-in insertion needs d x r and r x d weights, got " + shape_str(d.shape()) + " and " +
                      shape_str(u.shape()));
  }
  return [down, up, act](const Tensor&, const Tensor& f_out) {
    if (f_out.cols() != down.weight().rows()) throw ConfigError("plug-in insertion width mismatch at site");
    return bottleneck_delta(f_out, down.effective(), up.effective(), act);
  };
}

// ---------------------------------------------------------------- layout

ApetLayout default_apet_layout(const ModelConfig& cfg, std::size_t rank, double alpha) {
  LayoutEntry add;
  add.op = InsertionKind::Add;
  add.sites = default_pet_sites(PetKind::BitFit, cfg);
  LayoutEntry lowrank;
  lowrank.op = InsertionKind::ConcatLowRank;
  lowrank.sites = default_pet_sites(PetKind::LoRA, cfg);
  lowrank.rank = rank;
  lowrank.alpha = alpha;
  return {add, lowrank};
}

Json layout_to_json(const ApetLayout& layout) {
  Json arr = Json::array();
  for (const auto& e : layout) {
    Json j;
    j["op"] = insertion_kind_name(e.op);
    switch (e.op) {
      case InsertionKind::Add:
        j["sites"] = e.sites;
        break;
      case InsertionKind::ConcatPrompt:
        j["prompt_len"] = e.prompt_len;
        break;
      case InsertionKind::ConcatLowRank:
        j["sites"] = e.sites;
        j["rank"] = e.rank;
        j["alpha"] = e.alpha;
        break;
      case InsertionKind::PlugIn:
        j["sites"] = e.sites;
        j["rank"] = e.rank;
        j["activation"] = activation_name(e.activation);
        break;
    }
    arr.push_back(j);
  }
  return arr;
}

ApetLayout layout_from_json(const Json& j, const ModelConfig& cfg) {
  if (!j.is_array()) throw ConfigError("APET layout must be an array");
  ApetLayout layout;
  try {
    for (const auto& item : j) {
      LayoutEntry e;
      e.op = parse_insertion_kind(item.at("op").get<std::string>());
      if (item.contains("sites")) {
        const auto& s = item.at("sites");
        if (s.is_string()) {
          // shorthand for the method default site sets
          const std::string key = s.get<std::string>();
          if (key == "bias") e.sites = default_pet_sites(PetKind::BitFit, cfg);
          else if (key == "attention") e.sites = default_pet_sites(PetKind::LoRA, cfg);
          else if (key == "adapter") e.sites = default_pet_sites(PetKind::Adapter, cfg);
          else if (key == "all") e.sites = all_sites(cfg);
          else throw ConfigError("unknown site set '" + key + "'");
        } else {
          e.sites = s.get<std::vector<std::string>>();
        }
      } else if (e.op != InsertionKind::ConcatPrompt) {
        throw ConfigError("layout entry '" + std::string(insertion_kind_name(e.op)) + "' needs sites");
      }
      e.rank = item.value("rank", e.rank);
      e.alpha = item.value("alpha", e.alpha);
      e.prompt_len = item.value("prompt_len", e.prompt_len);
      if (item.contains("activation")) e.activation = parse_activation(item.at("activation").get<std::string>());
      layout.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("bad APET layout: ") + ex.what());
  }
  return layout;
}

namespace {

struct Host {
  std::string name;
  Shape shape;
  std::size_t entry;
  std::string site;
};

std::vector<Host> expand_layout(const ApetLayout& layout, const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  std::vector<Host> hosts;
  std::set<std::string> names;
  bool prompt_seen = false;
  auto push = [&](std::string name, Shape shape, std::size_t entry, const std::string& site) {
    if (!names.insert(name).second) throw ConfigError("APET layout creates '" + name + "' twice");
    hosts.push_back({std::move(name), std::move(shape), entry, site});
  };
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const auto& e = layout[k];
    if (e.op == InsertionKind::ConcatPrompt) {
      if (prompt_seen) throw ConfigError("APET layout has two prompt insertions");
      if (e.prompt_len == 0) throw ConfigError("prompt_len must be positive");
      prompt_seen = true;
      push("prompt", {e.prompt_len, d}, k, "");
      continue;
    }
    if (e.sites.empty()) throw ConfigError("APET layout entry has no sites");
    if ((e.op == InsertionKind::ConcatLowRank || e.op == InsertionKind::PlugIn) && e.rank == 0) {
      throw ConfigError("APET rank must be positive");
    }
    for (const auto& site : e.sites) {
      const SiteRef ref = parse_site(site);
      if (ref.block >= cfg.num_blocks) throw ConfigError("site '" + site + "' is outside the model");
      switch (e.op) {
        case InsertionKind::Add:
          push(site + ".offset", {1, d}, k, site);
          break;
        case InsertionKind::ConcatLowRank:
          push(site + ".lowrank_down", {d, e.rank}, k, site);
          push(site + ".lowrank_up", {e.rank, d}, k, site);
          break;
        case InsertionKind::PlugIn:
          push(site + ".plugin_down", {d, e.rank}, k, site);
          push(site + ".plugin_up", {e.rank, d}, k, site);
          break;
        case InsertionKind::ConcatPrompt:
          break;
      }
    }
  }
  return hosts;
}

bool is_down(const std::string& name) {
  return name.size() > 5 && name.compare(name.size() - 5, 5, "_down") == 0;
}

}  // namespace

std::vector<BudgetSite> layout_hosts(const ApetLayout& layout, const ModelConfig& cfg) {
  std::vector<BudgetSite> out;
  for (auto& h : expand_layout(layout, cfg)) out.push_back({h.name, h.shape});
  return out;
}

std::size_t layout_capacity(const ApetLayout& layout, const ModelConfig& cfg) {
  std::size_t c = 0;
  for (const auto& h : expand_layout(layout, cfg)) c += shape_size(h.shape);
  return c;
}

// ---------------------------------------------------------------- module

ApetModule::ApetModule(std::vector<NamedMaskedWeight> weights, std::vector<ApetInsertion> insertions,
                       std::size_t d_model)
    : weights_(std::move(weights)), insertions_(std::move(insertions)), d_model_(d_model) {
  std::vector<int> uses(weights_.size(), 0);
  bool prompt = false;
  for (const auto& ins : insertions_) {
    const std::size_t want = (ins.op == InsertionKind::Add || ins.op == InsertionKind::ConcatPrompt) ? 1 : 2;
    if (ins.weights.size() != want) {
      throw ConfigError("insertion '" + std::string(insertion_kind_name(ins.op)) + "' needs " +
                        std::to_string(want) + " weights");
    }
    if (ins.op == InsertionKind::ConcatPrompt) {
      if (prompt) throw ConfigError("APET module has two prompt insertions");
      prompt = true;
    } else {
      parse_site(ins.site);
    }
    for (auto i : ins.weights) {
      if (i >= weights_.size()) throw ConfigError("insertion refers to a missing masked weight");
      ++uses[i];
    }
  }
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (uses[i] != 1) throw ConfigError("masked weight '" + weights_[i].name + "' must be used by exactly one insertion");
  }
  for (auto& w : weights_) {
    w.weight.weight().set_requires_grad(true);
    total_budget_ += w.weight.trainable_count();
  }
  // Validates shapes eagerly.
  (void)hooks();
}

std::uint64_t ApetModule::mask_hash() const {
  std::vector<NamedTensor> masks;
  for (const auto& w : weights_) masks.push_back({w.name, w.weight.mask()});
  return hash_tensors(masks);
}

std::vector<NamedTensor> ApetModule::trainable_tensors() const {
  std::vector<NamedTensor> out;
  for (const auto& w : weights_) out.push_back({w.name, w.weight.weight()});
  return out;
}

DeltaHooks ApetModule::hooks() const {
  DeltaHooks hooks;
  // Insertions that share a site add their deltas.
  std::map<std::string, std::vector<DeltaFn>> by_site;
  std::vector<std::string> order;
  for (const auto& ins : insertions_) {
    const auto& w = ins.weights;
    DeltaFn fn;
    switch (ins.op) {
      case InsertionKind::ConcatPrompt: {
        const auto& mw = weights_[w[0]].weight;
        hooks.bind_prefix(apet_concatenate_prompt(mw), mw.weight().rows());
        continue;
      }
      case InsertionKind::Add:
        fn = apet_add(weights_[w[0]].weight, d_model_);
        break;
      case InsertionKind::ConcatLowRank:
        fn = apet_concatenate_lowrank(weights_[w[0]].weight, weights_[w[1]].weight, ins.alpha);
        break;
      case InsertionKind::PlugIn:
        fn = apet_plugin(weights_[w[0]].weight, weights_[w[1]].weight, ins.activation);
        break;
    }
    if (!by_site.count(ins.site)) order.push_back(ins.site);
    by_site[ins.site].push_back(std::move(fn));
  }
  for (const auto& site : order) {
    auto fns = by_site[site];
    if (fns.size() == 1) {
      hooks.bind(site, fns[0]);
      continue;
    }
    hooks.bind(site, [fns](const Tensor& h, const Tensor& f) {
      Tensor delta = fns[0](h, f);
      for (std::size_t i = 1; i < fns.size(); ++i) delta = add(delta, fns[i](h, f));
      return delta;
    });
  }
  return hooks;
}

ApetModule build_apet(const Backbone& model, const ApetLayout& layout, std::size_t total_budget,
                      const ApetOptions& options) {
  const auto& cfg = model.config();
  const auto hosts = expand_layout(layout, cfg);
  std::vector<BudgetSite> sites;
  for (const auto& h : hosts) sites.push_back({h.name, h.shape});
  const BudgetPlan plan = budget_allocate(total_budget, sites);

  for (const auto& e : layout) {
    if (e.op == InsertionKind::ConcatPrompt && e.prompt_len + options.input_len > cfg.max_seq_len) {
      throw ConfigError("prompt_len " + std::to_string(e.prompt_len) + " plus input length " +
                        std::to_string(options.input_len) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
    }
  }

  Rng init_rng(mix_seed(options.seed, 0x1417));
  std::vector<NamedMaskedWeight> weights;
  for (std::size_t k = 0; k < hosts.size(); ++k) {
    const auto& h = hosts[k];
    MaskSpec spec;
    spec.mode = options.mode;
    spec.axis = options.axis;
    spec.rows = h.shape[0];
    spec.cols = h.shape[1];
    spec.budget = plan.allocations[k].count;
    spec.seed = mix_seed(options.seed, k);
    Tensor w;
    if (h.name == "prompt") w = Tensor::gaussian(h.shape, 1.0, init_rng);
    else if (is_down(h.name)) w = Tensor::gaussian(h.shape, kProjectionInitStd, init_rng);
    else w = Tensor::zeros(h.shape);
    weights.push_back({h.name, MaskedWeight(w, gen_mask(spec))});
  }

  std::vector<ApetInsertion> insertions;
  for (std::size_t k = 0; k < hosts.size();) {
    const auto& e = layout[hosts[k].entry];
    ApetInsertion ins{hosts[k].site, e.op, {k}, e.alpha, e.activation};
    if (e.op == InsertionKind::ConcatLowRank || e.op == InsertionKind::PlugIn) {
      ins.weights.push_back(k + 1);
      k += 2;
    } else {
      k += 1;
    }
    insertions.push_back(std::move(ins));
  }
  return ApetModule(std::move(weights), std::move(insertions), cfg.d_model);
}

ApetModule reduce_to_pet(const PetModule& pet) {
  const auto& cfg = pet.config();
  if (cfg.kind == PetKind::Adapter && cfg.adapter_bias) {
    throw ConfigError("adapter biases have no masked counterpart");
  }
  std::vector<NamedMaskedWeight> weights;
  for (const auto& w : pet.weights()) {
    Tensor value = w.tensor.detach();
    // Bias offsets become 1 x d rows.
    if (value.shape().size() == 1) value = Tensor::from({1, value.size()}, value.values());
    weights.push_back({w.name, MaskedWeight(value, Tensor::full(value.shape(), 1.0))});
  }
  std::vector<ApetInsertion> insertions;
  for (const auto& b : pet.bindings()) {
    ApetInsertion ins;
    ins.site = b.site;
    ins.weights = b.weights;
    switch (cfg.kind) {
      case PetKind::Prompt:
        ins.op = InsertionKind::ConcatPrompt;
        break;
      case PetKind::BitFit:
        ins.op = InsertionKind::Add;
        break;
      case PetKind::LoRA:
        ins.op = InsertionKind::ConcatLowRank;
        ins.alpha = cfg.lora_alpha;
        break;
      case PetKind::Adapter:
        ins.op = InsertionKind::PlugIn;
        ins.activation = cfg.adapter_activation;
        break;
    }
    insertions.push_back(std::move(ins));
  }
  return ApetModule(std::move(weights), std::move(insertions), pet.d_model());
}

ApetModule reduce_to_pet(const Backbone& model, const PetConfig& cfg, std::uint64_t seed, std::size_t input_len) {
  return reduce_to_pet(attach_pet(model, cfg, seed, input_len));
}

// ---------------------------------------------------------------- checkpoint

Json apet_module_to_json(const ApetModule& module) {
  Json body;
  body["d_model"] = module.d_model();
  body["total_budget"] = module.total_budget();
  Json weights = Json::array();
  for (const auto& w : module.masked_weights()) {
    Json j = tensor_to_json(w.name, w.weight.weight());
    j["mask"] = pack_mask_bits(w.weight.mask());
    weights.push_back(std::move(j));
  }
  body["weights"] = weights;
  Json insertions = Json::array();
  for (const auto& ins : module.insertions()) {
    Json j;
    j["site"] = ins.site;
    j["op"] = insertion_kind_name(ins.op);
    Json names = Json::array();
    for (auto i : ins.weights) names.push_back(module.masked_weights()[i].name);
    j["weights"] = names;
    j["alpha"] = ins.alpha;
    j["activation"] = activation_name(ins.activation);
    insertions.push_back(std::move(j));
  }
  body["insertions"] = insertions;
  return make_checkpoint("apet", std::move(body));
}

ApetModule apet_module_from_json(const Json& doc) {
  const Json d = open_checkpoint(doc, "apet");
  try {
    std::vector<NamedMaskedWeight> weights;
    std::map<std::string, std::size_t> index;
    for (const auto& jw : d.at("weights")) {
      NamedTensor t = tensor_from_json(jw);
      Tensor mask = unpack_mask_bits(jw.at("mask").get<std::string>(), t.tensor.shape());
      index[t.name] = weights.size();
      weights.push_back({t.name, MaskedWeight(t.tensor, mask)});
    }
    std::vector<ApetInsertion> insertions;
    for (const auto& ji : d.at("insertions")) {
      ApetInsertion ins;
      ins.site = ji.at("site").get<std::string>();
      ins.op = parse_insertion_kind(ji.at("op").get<std::string>());
      for (const auto& name : ji.at("weights")) {
        auto it = index.find(name.get<std::string>());
        if (it == index.end()) throw ConfigError("APET checkpoint insertion names a missing weight");
        ins.weights.push_back(it->second);
      }
      ins.alpha = ji.at("alpha").get<double>();
      ins.activation = parse_activation(ji.at("activation").get<std::string>());
      insertions.push_back(std::move(ins));
    }
    ApetModule module(std::move(weights), std::move(insertions), d.at("d_model").get<std::size_t>());
    if (module.total_budget() != d.at("total_budget").get<std::size_t>()) {
      throw ConfigError("APET checkpoint budget does not match its masks");
    }
    return module;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad APET checkpoint: ") + e.what());
  }
}

void save_apet_module(const ApetModule& module, const std::filesystem::path& path) {
  write_json_file(path, apet_module_to_json(module));
}

ApetModule load_apet_module(const std::filesystem::path& path) { return apet_module_from_json(read_json_file(path)); }

}  // namespace petlab
