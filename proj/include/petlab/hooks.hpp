#pragma once

// Hidden-state modification sites. A hook bound to a site computes Δh from
// the site's input h_in and the sub-layer output f(h_in); the backbone then
// emits h_out = f(h_in) + Δh and nothing else changes.

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "petlab/tensor.hpp"

namespace petlab {

struct ModelConfig;

enum class SiteKind {
  Ln1,      // first layer-norm output
  Query,    // query projection output
  Key,      // key projection output
  Value,    // value projection output
  AttnOut,  // multi-head attention sub-layer output (after W_o)
  Ln2,      // second layer-norm output
  FfnOut,   // feed-forward sub-layer output
};

struct SiteRef {
  std::size_t block = 0;
  SiteKind kind = SiteKind::Ln1;
};

std::string site_name(std::size_t block, SiteKind kind);
std::string_view site_kind_name(SiteKind kind);
SiteKind parse_site_kind(std::string_view name);
// Parses "blocks.<b>.<kind>"; throws ConfigError on malformed names.
SiteRef parse_site(std::string_view name);
std::vector<std::string> all_sites(const ModelConfig& cfg);
// Sites whose sub-layer carries a bias vector of width d_model.
bool is_bias_site(SiteKind kind);

using DeltaFn = std::function<Tensor(const Tensor& h_in, const Tensor& f_out)>;
// Produces the rows prepended to every input sequence.
using PrefixFn = std::function<Tensor()>;

class DeltaHooks {
 public:
  // Throws ConfigError if the site is already bound.
  void bind(const std::string& site, DeltaFn fn);
  void bind_prefix(PrefixFn fn, std::size_t rows);
  // Union of two hook sets; overlap on any site (or two prefixes) is rejected.
  void merge(const DeltaHooks& other);

  const DeltaFn* find(const std::string& site) const;
  bool has_prefix() const { return prefix_.has_value(); }
  std::size_t prefix_rows() const { return prefix_rows_; }
  Tensor prefix() const;
  std::vector<std::string> sites() const;
  bool empty() const { return fns_.empty() && !prefix_; }

  // Every bound site must exist in a model with this configuration.
  void validate(const ModelConfig& cfg) const;

 private:
  std::map<std::string, DeltaFn> fns_;
  std::optional<PrefixFn> prefix_;
  std::size_t prefix_rows_ = 0;
};

// Values observed at a hooked site during one forward pass.
struct SiteRecord {
  Tensor f_out;
  Tensor delta;
  Tensor h_out;
};
using SiteTrace = std::map<std::string, SiteRecord>;

}  // namespace petlab
