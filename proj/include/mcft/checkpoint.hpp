#pragma once

#include <map>
#include <string>

#include "mcft/encoder.hpp"

namespace mcft {

/// Loaded checkpoint: the encoder plus any extra tensors that were stored
/// alongside it (e.g. a classifier head as "head.w"/"head.b").
struct Checkpoint {
  EncoderState state;
  std::map<std::string, Tensor> extra;
};

/// Container layout: 8-byte magic "MCFTCKP1", a little-endian u32 JSON header
/// length, the JSON header (schema_version, config, layer_mask, tensor
/// directory with per-block crc32), then float32 little-endian tensor blocks.
/// See docs/formats.md.
void save_checkpoint(const EncoderState& state, const std::string& path,
                     const std::map<std::string, Tensor>& extra = {});

Checkpoint load_checkpoint(const std::string& path);

uint32_t crc32(const void* data, size_t len);

}  // namespace mcft
