#ifndef DCV_HASH_HPP
#define DCV_HASH_HPP

#include "dcv/params.hpp"

#include <memory>
#include <string>

namespace dcv {

/// Incremental SHA-256.
class Sha256 {
public:
    Sha256();
    ~Sha256();
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t bytes);
    void update(const std::string& s) { update(s.data(), s.size()); }
    std::string hex_digest();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

std::string sha256_hex(const void* data, std::size_t bytes);

/// Hash of names, shapes and raw values, in registry order.
template <typename S>
std::string hash_params(const ParamStore<S>& params) {
    Sha256 h;
    for (const auto& [name, v] : params) {
        h.update(name);
        h.update(shape_str(v.shape()));
        h.update(v.ptr(), std::size_t(v.numel()) * sizeof(S));
    }
    return h.hex_digest();
}

}  // namespace dcv

#endif  // DCV_HASH_HPP
