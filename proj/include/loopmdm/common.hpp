#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace loopmdm {

#ifdef LOOPMDM_SINGLE
using real = float;
#else
using real = double;
#endif

// Error taxonomy. Shape/domain/contract errors signal caller bugs or bad data;
// config errors signal rejected run settings; io errors signal bad files.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline const char* code_version() {
#ifdef LOOPMDM_GIT_HASH
    return LOOPMDM_GIT_HASH;
#else
    return "untracked";
#endif
}

}  // namespace loopmdm
