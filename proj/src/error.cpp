#include "hsprobe/error.hpp"

namespace hsprobe {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::invalid_argument: return "invalid_argument";
        case ErrorKind::io: return "io";
        case ErrorKind::bad_magic: return "bad_magic";
        case ErrorKind::version_mismatch: return "version_mismatch";
        case ErrorKind::truncated: return "truncated";
        case ErrorKind::non_finite: return "non_finite";
        case ErrorKind::corrupt: return "corrupt";
        case ErrorKind::dimension_mismatch: return "dimension_mismatch";
        case ErrorKind::shape_mismatch: return "shape_mismatch";
        case ErrorKind::one_class: return "one_class";
        case ErrorKind::rank_deficient: return "rank_deficient";
        case ErrorKind::mode_mismatch: return "mode_mismatch";
    }
    return "unknown";
}

}  // namespace hsprobe
