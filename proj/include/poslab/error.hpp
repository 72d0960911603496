#pragma once

#include <stdexcept>
#include <string>

namespace poslab {

// Single exception type with a kind tag so call sites (and tests) can tell
// contract violations apart from environmental failures.
class Error : public std::runtime_error {
public:
    enum class Kind {
        lexicon,        // unknown numeral / verb / vp id
        ill_formed,     // record violates a grammar precondition (verb != subject)
        contract,       // API precondition violated by the caller
        config,         // invalid configuration value or key
        partition,      // split sizes exceed available pools
        render,         // canvas cannot fit the configured geometry
        shape,          // tensor/image dimension mismatch
        io,             // file system / serialization failure
        checkpoint,     // bad version tag or corrupt checkpoint
        diverged,       // non-finite training loss
        evaluation,     // empty prediction list etc.
    };

    Error(Kind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

}  // namespace poslab
