#include "ehs/crc64.hpp"

namespace ehs {

namespace {

struct Crc64Table {
    uint64_t t[256];
    Crc64Table() {
        const uint64_t poly = 0xC96C5795D7870F42ULL; // ECMA-182, reflected
        for (uint64_t i = 0; i < 256; ++i) {
            uint64_t c = i;
            for (int k = 0; k < 8; ++k) {
                c = (c & 1) ? (c >> 1) ^ poly : c >> 1;
            }
            t[i] = c;
        }
    }
};

const Crc64Table kTable;

} // namespace

uint64_t crc64(const void* data, size_t len, uint64_t crc) {
    const auto* p = static_cast<const unsigned char*>(data);
    crc = ~crc;
    for (size_t i = 0; i < len; ++i) {
        crc = kTable.t[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
    }
    return ~crc;
}

} // namespace ehs
