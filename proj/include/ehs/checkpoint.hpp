#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ehs/params.hpp"
#include "ehs/tensor.hpp"

namespace ehs {

// Model snapshot persisted as a single little-endian binary file:
//
//   "EHCK"  magic
//   u32     format version (currently 1)
//   u32     metadata byte length, then that many bytes of UTF-8 JSON
//   u32     tensor count, then per tensor:
//             u16 name length + name bytes
//             u8 dtype (0 = float32, 1 = float64), u8 rank, u32 extents...
//             row-major float64 payload
//   u64     CRC-64 of every byte between the magic and this field
//
// Payload values are written as float64 regardless of the tensor's dtype tag:
// float32 tensors hold float-rounded values, so the round trip is bitwise
// exact either way, and files are readable on any host.

struct CheckpointMeta {
    std::string model;         // e.g. "asr", "segment", "fusion"
    std::string task;          // task name, or "" when not applicable
    uint64_t config_fingerprint = 0;
    uint64_t seed = 0;
    int64_t step = 0;          // optimizer steps taken when saved
    std::string freeze_policy; // policy in force when saved, or ""
};

struct CheckpointTensor {
    std::string name;
    DType dtype = DType::f64;
    std::vector<int> shape;
    std::vector<double> data;

    int64_t numel() const {
        int64_t n = 1;
        for (int e : shape) n *= e;
        return n;
    }
};

struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    CheckpointMeta meta;
    std::vector<CheckpointTensor> tensors; // unique names, parameter order

    const CheckpointTensor* find(const std::string& name) const;
};

// Deep copy of the current parameter values. ConfigError on duplicate names.
Checkpoint snapshot(const ParamList& params, CheckpointMeta meta);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
void save_checkpoint(const ParamList& params, const CheckpointMeta& meta,
                     const std::string& path);

// FormatError on malformed or truncated files, VersionError on a version this
// build does not understand (checked before the checksum, since a future
// layout cannot be parsed at all), ChecksumError on corrupted content.
Checkpoint load_checkpoint(const std::string& path);

// Copies every checkpoint tensor back into the identically named parameter.
// Name, shape and dtype sets must match exactly; any difference aborts before
// a single value is written.
void restore_params(const Checkpoint& ckpt, ParamList& params);

struct TransferReport {
    std::vector<std::string> copied; // destination order
    int64_t scalars = 0;             // values copied in total
};

// Encoder-weight-only transfer: copies all and only `prefix`-tagged tensors
// from the checkpoint into the destination model. The prefixed name sets must
// match exactly with identical shapes and dtypes, and the destination must not
// contain "decoder." / "ctc_head." parameters — transfer targets are
// decoder-free prediction models. Any violation aborts with the destination
// bitwise untouched.
TransferReport transfer_encoder(const Checkpoint& source, ParamList& destination,
                                const std::string& prefix = "encoder.");

// Which parameter groups train. The TL policies apply to the pretraining model
// (encoder + attention decoder + CTC projection); the other two apply to
// downstream prediction models.
enum class FreezePolicy {
    TL1_update_all,     // pretraining: every weight updates
    TL2_freeze_decoder, // pretraining: "decoder." and "ctc_head." frozen
    finetune_encoder,   // downstream: every weight updates
    freeze_encoder,     // downstream: "encoder." frozen
};

const char* freeze_policy_name(FreezePolicy p);
FreezePolicy freeze_policy_from_string(const std::string& s); // ConfigError

// Sets trainable flags; the optimizer skips frozen parameters. ConfigError
// when the model lacks a namespace the policy refers to.
void apply_freeze(ParamList& params, FreezePolicy policy);

} // namespace ehs
