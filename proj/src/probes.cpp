#include "pinky/probes.hpp"

#include <fmt/format.h>

#include <algorithm>

namespace pinky {

ProbeId ProbeRegistry::create(std::string name, std::string provider, Enabler enabler) {
  for (const auto& p : probes_) {
    if (p->name == name) throw ProbeError(ProbeErrc::duplicate_name, "duplicate probe " + name);
  }
  auto p = std::make_unique<Probe>();
  p->id = static_cast<ProbeId>(probes_.size() + 1);
  p->name = std::move(name);
  p->provider = std::move(provider);
  p->enabler = std::move(enabler);
  probes_.push_back(std::move(p));
  return probes_.back()->id;
}

ProbeRegistry::Probe& ProbeRegistry::probe(ProbeId id) {
  if (id == 0 || id > probes_.size()) {
    throw ProbeError(ProbeErrc::unknown_probe, fmt::format("unknown probe id {}", id));
  }
  return *probes_[id - 1];
}

const ProbeRegistry::Probe& ProbeRegistry::probe(ProbeId id) const {
  return const_cast<ProbeRegistry*>(this)->probe(id);
}

void ProbeRegistry::register_consumer(ProbeId id, int consumer_id, Consumer consumer) {
  Probe& p = probe(id);
  for (const auto& c : p.consumers) {
    if (c.id == consumer_id) {
      throw ProbeError(ProbeErrc::duplicate_consumer_id,
                       fmt::format("consumer {} already registered on {}", consumer_id, p.name));
    }
  }
  p.consumers.push_back({consumer_id, std::move(consumer), true});
}

void ProbeRegistry::register_consumer(std::string_view name, int consumer_id, Consumer consumer) {
  register_consumer(id_of(name), consumer_id, std::move(consumer));
}

void ProbeRegistry::unregister_consumer(ProbeId id, int consumer_id) {
  std::erase_if(probe(id).consumers, [&](const ConsumerSlot& c) { return c.id == consumer_id; });
}

void ProbeRegistry::enable(ProbeId id) {
  Probe& p = probe(id);
  if (p.enabled) return;
  p.enabled = true;
  if (p.enabler) p.enabler(true);
}

void ProbeRegistry::disable(ProbeId id) {
  Probe& p = probe(id);
  if (!p.enabled) return;
  p.enabled = false;
  if (p.enabler) p.enabler(false);
}

ProbeId ProbeRegistry::id_of(std::string_view name) const {
  for (const auto& p : probes_) {
    if (p->name == name) return p->id;
  }
  throw ProbeError(ProbeErrc::unknown_probe, fmt::format("unknown probe '{}'", name));
}

ProbeId ProbeRegistry::resolve(std::string_view name) const {
  for (const auto& p : probes_) {
    if (p->name == name) return p->id;
  }
  std::string dotted(name);
  if (auto u = dotted.find('_'); u != std::string::npos) dotted[u] = '.';
  return id_of(dotted);
}

std::vector<std::string> ProbeRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& p : probes_) out.push_back(p->name);
  return out;
}

void ProbeRegistry::invoke(Probe& p, ConsumerSlot& slot, ProbeContext& ctx) {
  if (!slot.active) return;
  try {
    slot.fn(ctx);
  } catch (const std::exception& e) {
    slot.active = false;
    if (error_sink_) error_sink_(p.name, slot.id, e.what());
  } catch (...) {
    slot.active = false;
    if (error_sink_) error_sink_(p.name, slot.id, "unknown exception");
  }
}

void ProbeRegistry::broadcast(Probe& p, ProbeContext& ctx) {
  // consumers may register/unregister while being walked
  for (size_t i = 0; i < p.consumers.size();) {
    auto slot = p.consumers[i];
    invoke(p, slot, ctx);
    const auto it = std::find_if(p.consumers.begin(), p.consumers.end(),
                                 [&](const ConsumerSlot& c) { return c.id == slot.id; });
    if (it == p.consumers.end()) continue;  // removed itself; its successor now sits at i
    it->active = slot.active;
    i = static_cast<size_t>(it - p.consumers.begin()) + 1;
  }
}

void ProbeRegistry::fire_consumer(ProbeId id, int consumer_id, ProbeContext& ctx) {
  Probe& p = probe(id);
  if (!p.enabled) return;
  for (auto& c : p.consumers) {
    if (c.id == consumer_id) {
      invoke(p, c, ctx);
      return;
    }
  }
}

}  // namespace pinky
