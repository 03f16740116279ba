#include "ehs/checkpoint.hpp"

#include <cstdio>
#include <map>
#include <set>
#include <utility>

#include <json.hpp>

#include "ehs/binio.hpp"
#include "ehs/crc64.hpp"
#include "ehs/error.hpp"

namespace ehs {

namespace {

std::string hex16(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string meta_to_json(const CheckpointMeta& m) {
    nlohmann::ordered_json j;
    j["model"] = m.model;
    j["task"] = m.task;
    j["config_fingerprint"] = hex16(m.config_fingerprint);
    j["seed"] = m.seed;
    j["step"] = m.step;
    j["freeze_policy"] = m.freeze_policy;
    return j.dump();
}

CheckpointMeta meta_from_json(const std::string& text, const std::string& path) {
    static const std::set<std::string> known = {"model",          "task", "config_fingerprint",
                                                "seed",           "step", "freeze_policy"};
    try {
        auto j = nlohmann::json::parse(text);
        if (!j.is_object()) throw FormatError("checkpoint " + path + ": metadata is not an object");
        for (const auto& item : j.items()) {
            if (!known.count(item.key())) {
                throw FormatError("checkpoint " + path + ": unknown metadata key '" + item.key() + "'");
            }
        }
        CheckpointMeta m;
        m.model = j.at("model").get<std::string>();
        m.task = j.at("task").get<std::string>();
        std::string fp = j.at("config_fingerprint").get<std::string>();
        size_t used = 0;
        m.config_fingerprint = std::stoull(fp, &used, 16);
        if (used != fp.size() || fp.empty()) {
            throw FormatError("checkpoint " + path + ": bad config fingerprint '" + fp + "'");
        }
        m.seed = j.at("seed").get<uint64_t>();
        m.step = j.at("step").get<int64_t>();
        m.freeze_policy = j.at("freeze_policy").get<std::string>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint " + path + ": bad metadata: " + e.what());
    } catch (const std::invalid_argument&) {
        throw FormatError("checkpoint " + path + ": bad config fingerprint");
    } catch (const std::out_of_range&) {
        throw FormatError("checkpoint " + path + ": bad config fingerprint");
    }
}

bool starts_with(const std::string& s, const std::string& prefix) {
    return s.rfind(prefix, 0) == 0;
}

} // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

Checkpoint snapshot(const ParamList& params, CheckpointMeta meta) {
    Checkpoint c;
    c.meta = std::move(meta);
    std::set<std::string> seen;
    for (const auto& p : params) {
        if (!seen.insert(p.name).second) {
            throw ConfigError("snapshot: duplicate parameter name '" + p.name + "'");
        }
        CheckpointTensor t;
        t.name = p.name;
        t.dtype = p.t->dtype;
        t.shape = p.t->shape;
        t.data = p.t->data;
        c.tensors.push_back(std::move(t));
    }
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::set<std::string> seen;
    for (const auto& t : ckpt.tensors) {
        if (t.name.empty() || t.name.size() > 65535) {
            throw ConfigError("checkpoint: bad tensor name length " + std::to_string(t.name.size()));
        }
        if (!seen.insert(t.name).second) {
            throw ConfigError("checkpoint: duplicate tensor name '" + t.name + "'");
        }
        if (t.shape.empty() || t.shape.size() > 255) {
            throw ConfigError("checkpoint '" + t.name + "': bad rank " + std::to_string(t.shape.size()));
        }
        for (int e : t.shape) {
            if (e <= 0) throw ConfigError("checkpoint '" + t.name + "': non-positive extent");
        }
        if (static_cast<int64_t>(t.data.size()) != t.numel()) {
            throw ConfigError("checkpoint '" + t.name + "': payload size does not match shape");
        }
    }

    std::vector<uint8_t> out;
    put_bytes(out, "EHCK", 4);
    put_u32(out, Checkpoint::kVersion);
    std::string meta = meta_to_json(ckpt.meta);
    put_u32(out, static_cast<uint32_t>(meta.size()));
    put_bytes(out, meta.data(), meta.size());
    put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        put_u16(out, static_cast<uint16_t>(t.name.size()));
        put_bytes(out, t.name.data(), t.name.size());
        put_u8(out, t.dtype == DType::f32 ? 0 : 1);
        put_u8(out, static_cast<uint8_t>(t.shape.size()));
        for (int e : t.shape) put_u32(out, static_cast<uint32_t>(e));
        for (double v : t.data) put_f64(out, v);
    }
    put_u64(out, crc64(out.data() + 4, out.size() - 4));
    write_file_bytes(path, out);
}

void save_checkpoint(const ParamList& params, const CheckpointMeta& meta,
                     const std::string& path) {
    save_checkpoint(snapshot(params, meta), path);
}

Checkpoint load_checkpoint(const std::string& path) {
    auto bytes = read_file_bytes(path);
    const std::string what = "checkpoint " + path;
    ByteReader r(bytes.data(), bytes.size(), what);

    if (r.str(4) != "EHCK") throw FormatError(what + ": bad magic (not a checkpoint file)");
    uint32_t version = r.u32();
    if (version != Checkpoint::kVersion) {
        throw VersionError(what + ": format version " + std::to_string(version) +
                           ", this build reads version " + std::to_string(Checkpoint::kVersion));
    }
    if (bytes.size() < 20) throw FormatError(what + ": truncated (no checksum)");
    uint64_t expect = crc64(bytes.data() + 4, bytes.size() - 12);
    uint64_t stored = 0;
    for (int i = 0; i < 8; ++i) {
        stored |= static_cast<uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
    }
    if (expect != stored) {
        throw ChecksumError(what + ": checksum mismatch (stored " + hex16(stored) + ", computed " +
                            hex16(expect) + ")");
    }

    Checkpoint c;
    c.meta = meta_from_json(r.str(r.u32()), path);
    uint32_t n_tensors = r.u32();
    std::set<std::string> seen;
    for (uint32_t i = 0; i < n_tensors; ++i) {
        CheckpointTensor t;
        t.name = r.str(r.u16());
        if (t.name.empty()) throw FormatError(what + ": empty tensor name");
        if (!seen.insert(t.name).second) {
            throw FormatError(what + ": duplicate tensor name '" + t.name + "'");
        }
        uint8_t dcode = r.u8();
        if (dcode > 1) throw FormatError(what + ": '" + t.name + "' has unknown dtype code");
        t.dtype = dcode == 0 ? DType::f32 : DType::f64;
        uint8_t rank = r.u8();
        if (rank == 0) throw FormatError(what + ": '" + t.name + "' has rank 0");
        int64_t n = 1;
        for (int d = 0; d < rank; ++d) {
            uint32_t e = r.u32();
            if (e == 0 || e > (1u << 30)) {
                throw FormatError(what + ": '" + t.name + "' has bad extent " + std::to_string(e));
            }
            t.shape.push_back(static_cast<int>(e));
            n *= e;
            if (n > (int64_t(1) << 33)) {
                throw FormatError(what + ": '" + t.name + "' is implausibly large");
            }
        }
        t.data.resize(n);
        for (int64_t k = 0; k < n; ++k) t.data[static_cast<size_t>(k)] = r.f64();
        c.tensors.push_back(std::move(t));
    }
    if (r.pos() != bytes.size() - 8) {
        throw FormatError(what + ": trailing bytes after tensor table");
    }
    return c;
}

void restore_params(const Checkpoint& ckpt, ParamList& params) {
    std::map<std::string, const CheckpointTensor*> by_name;
    for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
    if (by_name.size() != params.size()) {
        throw ConfigError("restore: checkpoint holds " + std::to_string(by_name.size()) +
                          " tensors, model has " + std::to_string(params.size()) + " parameters");
    }
    std::vector<std::pair<Parameter*, const CheckpointTensor*>> plan;
    for (auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw ConfigError("restore: checkpoint lacks '" + p.name + "'");
        if (it->second->shape != p.t->shape) {
            throw ShapeError("restore: shape mismatch for '" + p.name + "'");
        }
        if (it->second->dtype != p.t->dtype) {
            throw ConfigError("restore: dtype mismatch for '" + p.name + "'");
        }
        plan.emplace_back(&p, it->second);
    }
    for (auto& [p, t] : plan) p->t->data = t->data;
}

TransferReport transfer_encoder(const Checkpoint& source, ParamList& destination,
                                const std::string& prefix) {
    if (prefix.empty()) throw ConfigError("transfer: empty name prefix");
    for (const auto& p : destination) {
        if (starts_with(p.name, "decoder.") || starts_with(p.name, "ctc_head.")) {
            throw ConfigError("transfer: destination contains '" + p.name +
                              "'; transfer targets are decoder-free prediction models");
        }
    }

    std::map<std::string, const CheckpointTensor*> src;
    for (const auto& t : source.tensors) {
        if (starts_with(t.name, prefix)) src[t.name] = &t;
    }
    if (src.empty()) {
        throw ConfigError("transfer: source checkpoint has no '" + prefix + "' tensors");
    }

    // Validate everything before touching the destination so a failed call
    // leaves the model bitwise unchanged.
    std::set<std::string> dst_names;
    std::vector<std::pair<Parameter*, const CheckpointTensor*>> plan;
    for (auto& p : destination) {
        if (!starts_with(p.name, prefix)) continue;
        if (!dst_names.insert(p.name).second) {
            throw ConfigError("transfer: duplicate destination parameter '" + p.name + "'");
        }
        auto it = src.find(p.name);
        if (it == src.end()) throw ConfigError("transfer: source lacks '" + p.name + "'");
        if (it->second->shape != p.t->shape) {
            throw ShapeError("transfer: shape mismatch for '" + p.name + "'");
        }
        if (it->second->dtype != p.t->dtype) {
            throw ConfigError("transfer: dtype mismatch for '" + p.name + "'");
        }
        plan.emplace_back(&p, it->second);
    }
    for (const auto& [name, t] : src) {
        if (!dst_names.count(name)) throw ConfigError("transfer: destination lacks '" + name + "'");
    }

    TransferReport rep;
    for (auto& [p, t] : plan) {
        p->t->data = t->data;
        rep.copied.push_back(p->name);
        rep.scalars += t->numel();
    }
    return rep;
}

const char* freeze_policy_name(FreezePolicy p) {
    switch (p) {
        case FreezePolicy::TL1_update_all: return "tl1";
        case FreezePolicy::TL2_freeze_decoder: return "tl2";
        case FreezePolicy::finetune_encoder: return "finetune_encoder";
        case FreezePolicy::freeze_encoder: return "freeze_encoder";
    }
    throw ConfigError("unknown freeze policy value");
}

FreezePolicy freeze_policy_from_string(const std::string& s) {
    if (s == "tl1" || s == "tl1_update_all") return FreezePolicy::TL1_update_all;
    if (s == "tl2" || s == "tl2_freeze_decoder") return FreezePolicy::TL2_freeze_decoder;
    if (s == "finetune_encoder" || s == "finetune") return FreezePolicy::finetune_encoder;
    if (s == "freeze_encoder") return FreezePolicy::freeze_encoder;
    throw ConfigError("unknown freeze policy '" + s +
                      "' (expected tl1, tl2, finetune_encoder or freeze_encoder)");
}

void apply_freeze(ParamList& params, FreezePolicy policy) {
    auto has_group = [&](const std::string& pre) {
        for (const auto& p : params) {
            if (starts_with(p.name, pre)) return true;
        }
        return false;
    };
    auto require = [&](const std::string& pre) {
        if (!has_group(pre)) {
            throw ConfigError(std::string("freeze policy ") + freeze_policy_name(policy) +
                              ": model has no '" + pre + "' parameters");
        }
    };

    std::vector<std::string> frozen;
    switch (policy) {
        case FreezePolicy::TL1_update_all:
            require("decoder.");
            require("ctc_head.");
            break;
        case FreezePolicy::TL2_freeze_decoder:
            require("decoder.");
            require("ctc_head.");
            frozen = {"decoder.", "ctc_head."};
            break;
        case FreezePolicy::finetune_encoder:
            require("encoder.");
            break;
        case FreezePolicy::freeze_encoder:
            require("encoder.");
            frozen = {"encoder."};
            break;
    }
    for (auto& p : params) {
        bool freeze = false;
        for (const auto& pre : frozen) {
            if (starts_with(p.name, pre)) {
                freeze = true;
                break;
            }
        }
        p.trainable = !freeze;
    }
}

} // namespace ehs
