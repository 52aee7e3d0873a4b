#include "fedsynth/params.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>

namespace fedsynth {

std::string_view to_string(LayerTag tag) {
  switch (tag) {
    case LayerTag::mapping: return "mapping";
    case LayerTag::viewpoint: return "viewpoint";
    case LayerTag::geometry: return "geometry";
    case LayerTag::render: return "render";
    case LayerTag::color: return "color";
    case LayerTag::upsample: return "upsample";
  }
  return "unknown";
}

std::optional<LayerTag> parse_layer_tag(std::string_view name) {
  for (LayerTag t : kAllLayerTags) {
    if (to_string(t) == name) return t;
  }
  return std::nullopt;
}

TagSet all_tags() { return TagSet(kAllLayerTags.begin(), kAllLayerTags.end()); }

std::string to_string(const TagSet& tags) {
  std::string out = "{";
  bool first = true;
  for (LayerTag t : tags) {
    out += first ? "" : ",";
    out += to_string(t);
    first = false;
  }
  return out + "}";
}

void TaggedParamSet::add(std::string name, LayerTag tag, ad::Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  entries_.push_back({std::move(name), tag, std::move(value)});
}

bool TaggedParamSet::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.name == name; });
}

const ParamEntry& TaggedParamSet::entry(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

const ad::Tensor& TaggedParamSet::at(std::string_view name) const { return entry(name).value; }

ad::Tensor& TaggedParamSet::mutable_at(std::string_view name) {
  for (auto& e : entries_) {
    if (e.name == name) return e.value;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

TagSet TaggedParamSet::tags() const {
  TagSet out;
  for (const auto& e : entries_) out.insert(e.tag);
  return out;
}

bool TaggedParamSet::has_tag(LayerTag tag) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const ParamEntry& e) { return e.tag == tag; });
}

std::size_t TaggedParamSet::element_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

std::size_t TaggedParamSet::element_count(const TagSet& tags) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (tags.count(e.tag)) n += e.value.numel();
  }
  return n;
}

TaggedParamSet TaggedParamSet::subset(const TagSet& tags) const {
  for (LayerTag t : tags) {
    if (!has_tag(t)) throw std::invalid_argument("parameter set has no tensor tagged '" + std::string(to_string(t)) + "'");
  }
  TaggedParamSet out;
  for (const auto& e : entries_) {
    if (tags.count(e.tag)) out.add(e.name, e.tag, e.value.clone());
  }
  return out;
}

TaggedParamSet TaggedParamSet::clone() const {
  TaggedParamSet out;
  for (const auto& e : entries_) out.add(e.name, e.tag, e.value.clone());
  return out;
}

TaggedParamSet TaggedParamSet::detached() const {
  TaggedParamSet out;
  for (const auto& e : entries_) out.add(e.name, e.tag, e.value.detach());
  return out;
}

void TaggedParamSet::set_trainable(const TagSet& trainable) {
  for (auto& e : entries_) e.value.requires_grad_(trainable.count(e.tag) > 0);
}

void TaggedParamSet::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

void TaggedParamSet::assign_from(const TaggedParamSet& other) {
  for (const auto& src : other.entries()) {
    auto& dst = mutable_at(src.name);
    if (dst.shape() != src.value.shape()) {
      throw ad::ShapeError("assign_from: '" + src.name + "' has shape " + ad::to_string(dst.shape()) + ", source " +
                           ad::to_string(src.value.shape()));
    }
    auto out = dst.mutable_data();
    auto in = src.value.data();
    std::copy(in.begin(), in.end(), out.begin());
  }
}

void TaggedParamSet::sgd_step(double learning_rate) {
  for (auto& e : entries_) {
    if (!e.value.requires_grad() || !e.value.has_grad()) continue;
    auto g = e.value.grad();
    auto p = e.value.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= learning_rate * g[i];
  }
}

bool TaggedParamSet::identical(const TaggedParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || a.tag != b.tag || a.value.shape() != b.value.shape()) return false;
    auto x = a.value.data();
    auto y = b.value.data();
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace fedsynth
