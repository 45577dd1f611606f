#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "privdiff/errors.hpp"
#include "privdiff/tensor.hpp"

namespace privdiff {

// Parameter partition: backbone / attention / conditioning mirror the three
// fine-tuning groups of the diffusion model; encoder/decoder belong to the
// autoencoder and are never trainable during the private phase.
enum class ParamGroup : uint8_t {
    Backbone = 0,
    Attention = 1,
    Conditioning = 2,
    Encoder = 3,
    Decoder = 4,
};

struct ParamEntry {
    Tensor value;
    bool trainable = false;
    ParamGroup group = ParamGroup::Backbone;
    int attn_index = 0;  // >0 for parameters of attention module #k
    bool lora_adapter = false;
};

// Named model parameters in a deterministic (lexicographic) order. All
// flattening (gradient clipping, noise, checkpointing) walks this order.
class ParamStore {
public:
    using Map = std::map<std::string, ParamEntry>;

    void add(const std::string& name, Tensor value, ParamGroup group, int attn_index = 0,
             bool lora_adapter = false) {
        if (entries_.count(name)) throw ContractError("duplicate parameter name: " + name);
        entries_[name] = ParamEntry{std::move(value), false, group, attn_index, lora_adapter};
    }

    bool has(const std::string& name) const { return entries_.count(name) > 0; }

    ParamEntry& entry(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }
    const ParamEntry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }

    Tensor& tensor(const std::string& name) { return entry(name).value; }
    const Tensor& tensor(const std::string& name) const { return entry(name).value; }

    Map& all() { return entries_; }
    const Map& all() const { return entries_; }

    void freeze_all() {
        for (auto& [name, e] : entries_) e.trainable = false;
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& [name, e] : entries_)
            if (e.trainable) out.push_back(name);
        return out;
    }

    int64_t total_scalar_count() const {
        int64_t n = 0;
        for (const auto& [name, e] : entries_) n += e.value.numel();
        return n;
    }

    int64_t trainable_scalar_count() const {
        int64_t n = 0;
        for (const auto& [name, e] : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

private:
    Map entries_;
};

}  // namespace privdiff
