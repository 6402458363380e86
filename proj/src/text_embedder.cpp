#include "migkit/text_embedder.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

namespace migkit {

std::vector<std::string> ToyTextEmbedder::default_vocabulary() {
  return {kUnk,   kNull,  "a",     "an",   "the",    "and",   "red",    "green", "blue",  "yellow",
          "square", "circle", "left", "right", "top", "bottom", "center", "upper", "lower", "middle",
          "small",  "large",  "on",   "of",   "with",  "next",  "to",     "above", "below", "near"};
}

ToyTextEmbedder::ToyTextEmbedder(std::string name, std::vector<std::string> vocabulary, int dim, Rng& rng)
    : name_(std::move(name)), vocab_(std::move(vocabulary)), dim_(dim) {
  if (dim < 1) throw std::invalid_argument("text embedding dim must be positive");
  for (const char* special : {kUnk, kNull})
    if (std::find(vocab_.begin(), vocab_.end(), special) == vocab_.end()) vocab_.insert(vocab_.begin(), special);
  for (size_t i = 0; i < vocab_.size(); ++i) index_.emplace(vocab_[i], static_cast<int>(i));
  unk_ = index_.at(kUnk);
  null_ = index_.at(kNull);
  table_ = Tensor::uniform({vocab_size(), dim}, -1.0, 1.0, rng);
}

std::vector<int> ToyTextEmbedder::tokenize(std::string_view caption) const {
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    auto it = index_.find(word);
    ids.push_back(it == index_.end() ? unk_ : it->second);
    word.clear();
  };
  for (char ch : caption) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c >= 0x80)
      word.push_back(static_cast<char>(std::tolower(c)));
    else
      flush();
  }
  flush();
  if (ids.empty()) throw std::invalid_argument("cannot embed an empty caption");
  return ids;
}

Tensor ToyTextEmbedder::tokens(std::string_view caption) const { return gather_rows(table_, tokenize(caption)); }

Tensor ToyTextEmbedder::null_tokens() const { return gather_rows(table_, {null_}); }

Tensor ToyTextEmbedder::pooled(std::string_view caption) const { return mean_rows(tokens(caption)); }

std::vector<std::string> load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
    size_t b = 0;
    while (b < line.size() && std::isspace(static_cast<unsigned char>(line[b]))) ++b;
    line = line.substr(b);
    if (line.empty() || line[0] == '#') continue;
    std::transform(line.begin(), line.end(), line.begin(), [](unsigned char c) { return std::tolower(c); });
    words.push_back(line);
  }
  if (words.empty()) throw std::runtime_error("vocabulary file " + path + " is empty");
  return words;
}

}  // namespace migkit
