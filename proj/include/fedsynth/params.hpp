#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "fedsynth/tensor.hpp"

namespace fedsynth {

/// Layer role of a generator tensor; the unit of partial upload.
enum class LayerTag { mapping, viewpoint, geometry, render, color, upsample };

inline constexpr std::array<LayerTag, 6> kAllLayerTags = {LayerTag::mapping,  LayerTag::viewpoint,
                                                          LayerTag::geometry, LayerTag::render,
                                                          LayerTag::color,    LayerTag::upsample};

using TagSet = std::set<LayerTag>;

std::string_view to_string(LayerTag tag);
std::optional<LayerTag> parse_layer_tag(std::string_view name);
TagSet all_tags();
std::string to_string(const TagSet& tags);

struct ParamEntry {
  std::string name;
  LayerTag tag;
  ad::Tensor value;
};

/// Named parameter tensors, each carrying exactly one layer tag. Entry order
/// is insertion order and is part of the deterministic contract.
class TaggedParamSet {
 public:
  void add(std::string name, LayerTag tag, ad::Tensor value);

  bool contains(std::string_view name) const;
  const ad::Tensor& at(std::string_view name) const;
  const ParamEntry& entry(std::string_view name) const;
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  TagSet tags() const;
  bool has_tag(LayerTag tag) const;

  std::size_t element_count() const;
  std::size_t element_count(const TagSet& tags) const;
  /// Serialized size at 8 bytes per element.
  std::size_t byte_count() const { return element_count() * 8; }

  /// Deep copy of the entries whose tag is in `tags`. Throws if a requested
  /// tag has no entry.
  TaggedParamSet subset(const TagSet& tags) const;
  /// Deep copy, no gradient tracking.
  TaggedParamSet clone() const;
  /// Storage-sharing copy with gradient tracking off.
  TaggedParamSet detached() const;

  /// Turns tracking on for tensors whose tag is in `trainable`, off otherwise.
  void set_trainable(const TagSet& trainable);
  void zero_grad();

  /// Overwrites values by name from `other` (which may be a subset).
  void assign_from(const TaggedParamSet& other);

  /// p -= lr * grad for every tracked tensor that received a gradient.
  void sgd_step(double learning_rate);

  /// Bitwise equality of names, tags, shapes and values.
  bool identical(const TaggedParamSet& other) const;

 private:
  ad::Tensor& mutable_at(std::string_view name);
  std::vector<ParamEntry> entries_;
};

}  // namespace fedsynth
