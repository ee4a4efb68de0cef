#include "dcv/hash.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <stdexcept>

namespace dcv {

struct Sha256::Impl {
    EVP_MD_CTX* ctx = nullptr;
};

Sha256::Sha256() : impl_(std::make_unique<Impl>()) {
    impl_->ctx = EVP_MD_CTX_new();
    if (!impl_->ctx || EVP_DigestInit_ex(impl_->ctx, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 init failed");
}

Sha256::~Sha256() { EVP_MD_CTX_free(impl_->ctx); }

void Sha256::update(const void* data, std::size_t bytes) {
    if (EVP_DigestUpdate(impl_->ctx, data, bytes) != 1) throw std::runtime_error("sha256 update failed");
}

std::string Sha256::hex_digest() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(impl_->ctx, md, &len) != 1) throw std::runtime_error("sha256 final failed");
    std::string out;
    char buf[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof(buf), "%02x", md[i]);
        out += buf;
    }
    return out;
}

std::string sha256_hex(const void* data, std::size_t bytes) {
    Sha256 h;
    h.update(data, bytes);
    return h.hex_digest();
}

}  // namespace dcv
