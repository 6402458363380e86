#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "migkit/nn.hpp"

namespace migkit {

// Closed-vocabulary caption encoder standing in for a pretrained text model:
// one learned row per word, mean pooling.
class ToyTextEmbedder {
 public:
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kNull = "<null>";

  static std::vector<std::string> default_vocabulary();

  ToyTextEmbedder() = default;
  ToyTextEmbedder(std::string name, std::vector<std::string> vocabulary, int dim, Rng& rng);

  // Lower-cased word ids; unknown words map to <unk>. Throws on an empty caption.
  std::vector<int> tokenize(std::string_view caption) const;
  // [n_words, dim]
  Tensor tokens(std::string_view caption) const;
  // Single <null> token for unconditional passes.
  Tensor null_tokens() const;
  // [1, dim]
  Tensor pooled(std::string_view caption) const;

  int dim() const { return dim_; }
  int vocab_size() const { return static_cast<int>(vocab_.size()); }
  const std::string& name() const { return name_; }
  Tensor& table() { return table_; }
  const Tensor& table() const { return table_; }

 private:
  std::string name_;
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
  Tensor table_;
  int dim_ = 0;
  int unk_ = 0;
  int null_ = 0;
};

std::vector<std::string> load_vocabulary(const std::string& path);

}  // namespace migkit
