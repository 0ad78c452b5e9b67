from pathlib import Path

from setuptools import find_packages, setup


# Utility function to read the README file.
# Used for the long_description.
def read(fname):
    return (Path(__file__).resolve().parent / fname).read_text(encoding="utf-8")


setup(
    name="tensor-programs",
    version="0.1.0",
    description="Infinite-width limits of tensor programs, checked against finite simulations",
    long_description=read("README.md"),
    long_description_content_type="text/markdown",
    license="MIT",
    platforms="any",
    packages=find_packages(exclude=["tests", "tests.*"]),
    include_package_data=True,
    package_data={"tensor_programs": ["defaults.yml"]},
    install_requires=["mkdocs>=1.2.3", "numpy>=1.21", "scipy>=1.7"],
    entry_points={"console_scripts": ["tp = tensor_programs.cli:main"]},
    python_requires=">=3.8",
    classifiers=[
        "License :: OSI Approved :: MIT License",
        "Operating System :: POSIX :: Linux",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3 :: Only",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
)
