import os
import sys
from setuptools import setup

# Configuration options edit
cfg = {
    "package_name": "nfreg",
    "author": "nfreg developers",
    "author_email": "nfreg@users.noreply.github.com",
    "description": "Neural deformation fields and neural ICP for template-to-point-cloud registration",
    "license": "BSD2",
    "keywords": "point cloud, registration, neural fields, ICP, skinning",
    "requirements_file": "requirements/requirements-all.txt",
    "test_requirements_file": "requirements/requirements-test.txt",
    "url": "https://github.com/nfreg/nfreg",
    "classifiers": [
        "Development Status :: 3 - Alpha",
        "License :: OSI Approved :: BSD License",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
}

# -----------------------------------------------------------------------------
# Boilerplate below here should not require editing


def read_reqs(path):
    reqs = []  # requirements array
    with open(path, "r") as reqs_file:
        for line in reqs_file:
            if not line.strip():
                continue
            reqs.append(line)
    return reqs


extra = {}
extra["install_requires"] = read_reqs(cfg["requirements_file"])
extra["tests_require"] = read_reqs(cfg["test_requirements_file"])

with open(os.path.join(cfg["package_name"], "_version.py"), "r") as versionfile:
    version = versionfile.readline().split()[-1].strip("\"'\n")

with open("README.md") as f:
    long_description = f.read()

setup(
    name=cfg["package_name"],
    packages=[cfg["package_name"]],
    package_data={cfg["package_name"]: ["schemas/*.yaml"]},
    include_package_data=True,
    version=version,
    description=cfg["description"],
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=cfg["classifiers"],
    license=cfg["license"],
    keywords=cfg["keywords"],
    url=cfg["url"],
    author=cfg["author"],
    author_email=cfg["author_email"],
    entry_points={"console_scripts": ["nfreg = nfreg.cli:main"]},
    **extra
)
