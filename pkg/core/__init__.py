"""
PF-cpGAN desk toolkit: coupled conditional GANs for profile/frontal matching.
"""

import subprocess
from pathlib import Path

__version__ = "0.4.0"


def describe_version() -> str:
    """git-describe style version string, falling back to the package version"""
    root = Path(__file__).resolve().parent.parent
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=root, capture_output=True, text=True, timeout=5, check=True,
        )
        described = out.stdout.strip()
        if described:
            return f"{__version__}+{described}"
    except (subprocess.SubprocessError, FileNotFoundError, OSError):
        pass
    return f"v{__version__}"
