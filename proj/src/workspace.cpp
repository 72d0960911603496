#include "poslab/workspace.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cstdlib>

#include "poslab/error.hpp"

namespace poslab {

namespace fs = std::filesystem;

void WorkspaceLayout::ensure() const {
    fs::create_directories(datasets());
    fs::create_directories(runs());
    fs::create_directories(reports());
}

WorkspaceLayout resolve_workspace(const std::string& flag_value) {
    const char* env = std::getenv("POSLAB_WORKSPACE");
    if (env && *env) return {fs::path(env)};
    if (!flag_value.empty()) return {fs::path(flag_value)};
    return {fs::path("poslab-workspace")};
}

WorkspaceLock::WorkspaceLock(const WorkspaceLayout& ws) {
    fs::create_directories(ws.root);
    const fs::path lock_path = ws.root / ".lock";
    fd_ = ::open(lock_path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw Error(Error::Kind::io, "cannot open workspace lock: " + lock_path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw Error(Error::Kind::io,
                    "workspace is locked by another sweep: " + lock_path.string());
    }
}

WorkspaceLock::~WorkspaceLock() {
    if (fd_ >= 0) {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }
}

}  // namespace poslab
