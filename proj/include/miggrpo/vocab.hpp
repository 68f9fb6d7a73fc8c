// Copyright 2026 The miggrpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace miggrpo {

using Token = int;
using TokenSeq = std::vector<Token>;

/// Token space of the toy policy.
///
/// Layout (ids in order):
///   tag tokens       <think> </think> <answer> </answer>
///   JSON structure   {"bbox_2d": [   ,   ], "image":    }
///   grid edges       COORD_0 ... COORD_K   (COORD_k renders k * bin_width)
///   image indices    IMG_0 ... IMG_{m-1}
///   filler           R_0 ... R_{F-1}      (rendered "r0", "r1", ...)
///   EOS              (renders as the empty string)
///
/// The K coordinate bins per axis are delimited by K + 1 grid edges, so both
/// a box's low corner and its high corner are expressible with one token each.
class Vocabulary {
 public:
  enum Special : Token {
    kThinkOpen = 0,
    kThinkClose,
    kAnswerOpen,
    kAnswerClose,
    kBboxOpen,
    kSep,
    kImageKey,
    kObjClose,
    kNumStructural
  };

  struct Config {
    int extent = 60;
    int bins = 10;
    int max_images = 4;
    int filler = 8;
  };

  Vocabulary() : Vocabulary(Config{}) {}

  explicit Vocabulary(Config cfg) : cfg_(cfg) {
    if (cfg.bins < 1 || cfg.extent % cfg.bins != 0) {
      throw std::invalid_argument("image extent must be divisible by the bin count");
    }
    if (cfg.max_images < 1 || cfg.max_images > 10 || cfg.filler < 1 || cfg.filler > 10) {
      throw std::invalid_argument("vocabulary sizes out of range");
    }
    renderings_ = {"<think>", "</think>", "<answer>", "</answer>", "{\"bbox_2d\": [", ",", "], \"image\": ", "}"};
    names_ = {"THINK_OPEN", "THINK_CLOSE", "ANSWER_OPEN", "ANSWER_CLOSE", "BBOX_OPEN", "SEP", "IMAGE_KEY", "OBJ_CLOSE"};
    for (int k = 0; k <= cfg.bins; ++k) {
      renderings_.push_back(std::to_string(k * bin_width()));
      names_.push_back("COORD_" + std::to_string(k));
    }
    for (int i = 0; i < cfg.max_images; ++i) {
      renderings_.push_back(std::to_string(i));
      names_.push_back("IMG_" + std::to_string(i));
    }
    for (int f = 0; f < cfg.filler; ++f) {
      renderings_.push_back("r" + std::to_string(f));
      names_.push_back("R_" + std::to_string(f));
    }
    renderings_.emplace_back("");
    names_.emplace_back("EOS");
  }

  const Config& config() const { return cfg_; }
  int size() const { return static_cast<int>(renderings_.size()); }
  int bins() const { return cfg_.bins; }
  int extent() const { return cfg_.extent; }
  int bin_width() const { return cfg_.extent / cfg_.bins; }
  int max_images() const { return cfg_.max_images; }
  int filler_count() const { return cfg_.filler; }

  Token coord(int edge) const {
    if (edge < 0 || edge > cfg_.bins) throw std::out_of_range("grid edge out of range");
    return kNumStructural + edge;
  }
  Token coord_for_pixel(int px) const {
    if (px % bin_width() != 0) throw std::invalid_argument("pixel coordinate is not on the grid");
    return coord(px / bin_width());
  }
  Token image(int i) const {
    if (i < 0 || i >= cfg_.max_images) throw std::out_of_range("image index token out of range");
    return kNumStructural + cfg_.bins + 1 + i;
  }
  Token filler(int f) const {
    if (f < 0 || f >= cfg_.filler) throw std::out_of_range("filler token out of range");
    return kNumStructural + cfg_.bins + 1 + cfg_.max_images + f;
  }
  Token eos() const { return size() - 1; }

  bool is_coord(Token t) const { return t >= coord(0) && t <= coord(cfg_.bins); }
  bool is_image(Token t) const { return t >= image(0) && t < image(0) + cfg_.max_images; }
  bool is_filler(Token t) const { return t >= filler(0) && t < filler(0) + cfg_.filler; }
  int coord_pixel(Token t) const { return (t - coord(0)) * bin_width(); }
  int image_index(Token t) const { return t - image(0); }

  const std::string& rendering(Token t) const {
    check(t);
    return renderings_[static_cast<std::size_t>(t)];
  }
  const std::string& name(Token t) const {
    check(t);
    return names_[static_cast<std::size_t>(t)];
  }

  void check(Token t) const {
    if (t < 0 || t >= size()) throw std::out_of_range("token id " + std::to_string(t) + " not in vocabulary");
  }

 private:
  Config cfg_;
  std::vector<std::string> renderings_;
  std::vector<std::string> names_;
};

/// Concatenated renderings up to (not including) the first EOS.
inline std::string render(std::span<const Token> tokens, const Vocabulary& vocab) {
  std::string out;
  for (Token t : tokens) {
    vocab.check(t);
    if (t == vocab.eos()) break;
    out += vocab.rendering(t);
  }
  return out;
}

/// Canonical 16-token response: think block with `reasoning` filler tokens,
/// then the JSON answer. The caller supplies grid-aligned corners.
inline TokenSeq canonical_tokens(const Vocabulary& vocab, std::span<const int> reasoning, int x1, int y1, int x2,
                                 int y2, int image_index) {
  TokenSeq seq{Vocabulary::kThinkOpen};
  for (int f : reasoning) seq.push_back(vocab.filler(f));
  seq.push_back(Vocabulary::kThinkClose);
  seq.push_back(Vocabulary::kAnswerOpen);
  seq.push_back(Vocabulary::kBboxOpen);
  seq.push_back(vocab.coord_for_pixel(x1));
  seq.push_back(Vocabulary::kSep);
  seq.push_back(vocab.coord_for_pixel(y1));
  seq.push_back(Vocabulary::kSep);
  seq.push_back(vocab.coord_for_pixel(x2));
  seq.push_back(Vocabulary::kSep);
  seq.push_back(vocab.coord_for_pixel(y2));
  seq.push_back(Vocabulary::kImageKey);
  seq.push_back(vocab.image(image_index));
  seq.push_back(Vocabulary::kObjClose);
  seq.push_back(Vocabulary::kAnswerClose);
  return seq;
}

/// Inverse of render for texts built from vocabulary renderings. Numbers
/// directly after the image key map to image tokens, other numbers to grid
/// edges. Returns nullopt when the text does not decompose.
inline std::optional<TokenSeq> tokenize(std::string_view text, const Vocabulary& vocab) {
  TokenSeq out;
  std::size_t pos = 0;
  auto is_digit = [](char c) { return c >= '0' && c <= '9'; };
  while (pos < text.size()) {
    bool matched = false;
    for (Token t = 0; t < Vocabulary::kNumStructural; ++t) {
      const std::string& r = vocab.rendering(t);
      if (text.substr(pos, r.size()) == r) {
        out.push_back(t);
        pos += r.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    const bool filler = text[pos] == 'r';
    std::size_t end = pos + (filler ? 1 : 0);
    while (end < text.size() && is_digit(text[end])) ++end;
    const std::size_t first_digit = pos + (filler ? 1 : 0);
    if (end == first_digit || end - first_digit > 6) return std::nullopt;
    const int value = std::stoi(std::string(text.substr(first_digit, end - first_digit)));
    if (filler) {
      if (value >= vocab.filler_count()) return std::nullopt;
      out.push_back(vocab.filler(value));
    } else if (!out.empty() && out.back() == Vocabulary::kImageKey) {
      if (value >= vocab.max_images()) return std::nullopt;
      out.push_back(vocab.image(value));
    } else {
      if (value % vocab.bin_width() != 0 || value > vocab.extent()) return std::nullopt;
      out.push_back(vocab.coord_for_pixel(value));
    }
    pos = end;
  }
  return out;
}

}  // namespace miggrpo
