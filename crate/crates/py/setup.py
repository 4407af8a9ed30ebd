"""Builds the `cavsim` extension module with cargo.

setuptools-rust is not assumed; instead build_ext shells out to
`cargo build --release --features extension-module` and copies the
resulting cdylib to wherever setuptools wants the extension.
"""

import json
import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

CRATE_DIR = Path(__file__).resolve().parent


def cargo_target_dir() -> Path:
    meta = subprocess.run(
        ["cargo", "metadata", "--format-version", "1", "--no-deps"],
        cwd=CRATE_DIR,
        check=True,
        capture_output=True,
    )
    return Path(json.loads(meta.stdout)["target_directory"])


class CargoBuildExt(build_ext):
    def build_extension(self, ext: Extension) -> None:
        subprocess.run(
            ["cargo", "build", "--release", "--features", "extension-module"],
            cwd=CRATE_DIR,
            check=True,
        )
        built = cargo_target_dir() / "release" / "libcavsim.so"
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, dest)


setup(
    ext_modules=[Extension("cavsim", sources=[])],
    cmdclass={"build_ext": CargoBuildExt},
)
