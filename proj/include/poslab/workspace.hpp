#pragma once

#include <filesystem>
#include <string>

namespace poslab {

// Directory layout rooted at the workspace:
//   datasets/<name>/   generated or ingested corpora
//   runs/<run_id>/     config copy, metrics.csv, checkpoints/
//   reports/           summary tables and learning-curve plots
struct WorkspaceLayout {
    std::filesystem::path root;

    std::filesystem::path datasets() const { return root / "datasets"; }
    std::filesystem::path runs() const { return root / "runs"; }
    std::filesystem::path reports() const { return root / "reports"; }
    void ensure() const;
};

// POSLAB_WORKSPACE overrides the workspace root; otherwise the --workspace
// flag (or its default) applies.
WorkspaceLayout resolve_workspace(const std::string& flag_value);

// Advisory lock that serializes sweeps against one workspace.
class WorkspaceLock {
public:
    explicit WorkspaceLock(const WorkspaceLayout& ws);
    ~WorkspaceLock();
    WorkspaceLock(const WorkspaceLock&) = delete;
    WorkspaceLock& operator=(const WorkspaceLock&) = delete;

private:
    int fd_ = -1;
};

}  // namespace poslab
