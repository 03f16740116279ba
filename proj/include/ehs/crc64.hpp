#pragma once

#include <cstddef>
#include <cstdint>

namespace ehs {

// CRC-64/XZ (ECMA-182 polynomial, reflected). Used for checkpoint payload
// checksums and config fingerprints.
uint64_t crc64(const void* data, size_t len, uint64_t crc = 0);

} // namespace ehs
