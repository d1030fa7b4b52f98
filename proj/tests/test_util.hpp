#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "petlab/tensor.hpp"
#include "petlab/transformer.hpp"

namespace testutil {

inline petlab::Tensor rand_tensor(petlab::Shape shape, petlab::Rng& rng, double lo = -2.0, double hi = 2.0,
                                  bool requires_grad = true) {
  return petlab::Tensor::uniform(std::move(shape), lo, hi, rng, requires_grad);
}

inline std::size_t rand_int(petlab::Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

inline petlab::ModelConfig tiny_config(std::size_t blocks = 2, std::size_t classes = 3) {
  petlab::ModelConfig c;
  c.num_blocks = blocks;
  c.d_model = 8;
  c.num_heads = 2;
  c.d_ff = 16;
  c.vocab_size = 24;
  c.max_seq_len = 16;
  c.num_classes = classes;
  return c;
}

inline std::vector<petlab::TokenSeq> rand_batch(petlab::Rng& rng, std::size_t batch, std::size_t len,
                                                std::size_t vocab) {
  std::vector<petlab::TokenSeq> out(batch, petlab::TokenSeq(len));
  for (auto& s : out) {
    for (auto& t : s) t = static_cast<std::uint32_t>(rng() % vocab);
  }
  return out;
}

}  // namespace testutil
