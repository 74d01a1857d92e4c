import logging
import os
from typing import Optional

import git

logger = logging.getLogger(__name__)

PIXDIFF_PROJECT_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

OUTPUT_ENV = "PIXDIFF_OUTPUT"
DEFAULT_OUTPUT = "pixdiff-runs"


def output_root(explicit: Optional[str] = None) -> str:
    """--output wins, then $PIXDIFF_OUTPUT, then ./pixdiff-runs."""
    if explicit:
        return explicit
    return os.environ.get(OUTPUT_ENV) or os.path.join(os.getcwd(), DEFAULT_OUTPUT)


def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def source_revision(path: str = PIXDIFF_PROJECT_DIR) -> Optional[str]:
    """HEAD commit of the checkout containing `path`, or None outside git."""
    try:
        repo = git.Repo(path, search_parent_directories=True)
        return repo.head.commit.hexsha
    except (git.InvalidGitRepositoryError, git.NoSuchPathError, ValueError) as e:
        logger.debug(f"No git revision for {path}: {e}")
        return None


if __name__ == "__main__":
    print(PIXDIFF_PROJECT_DIR)
