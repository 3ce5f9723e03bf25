from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="scene_recon",
    version="0.1.0",
    description="Object-level 3D scene reconstruction from partial point clouds with disentangled transformer queries",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=("tests",)),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.10",
    install_requires=[
        "torch>=2.1",
        "numpy>=1.24",
        "scipy>=1.10",
        "trimesh>=4.0",
        "rtree>=1.0",
        "tqdm>=4.60",
    ],
    extras_require={
        "test": ["pytest>=7.0", "shapely>=2.0"],
    },
    entry_points={
        "console_scripts": ["scene-recon=scene_recon.cli:main"],
    },
)
