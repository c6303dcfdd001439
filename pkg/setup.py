from setuptools import setup, find_packages

setup(
    name="binloc",
    version="0.1.0",
    package_dir={"": "binloc"},
    packages=find_packages(where="binloc", exclude=["tests", "tests.*"]),
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "pandas>=1.5.0",
        "scikit-learn>=1.2.0",
        "jinja2>=3.1.0",
        "rich>=13.0.0",
    ],
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "black>=22.0.0",
            "mypy>=1.0.0",
            "mpmath>=1.3.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "binloc=binloc.cli:main",
        ],
    },
    python_requires=">=3.8",
    description="Supervised binaural co-localization of one or two sound sources with locally-linear Gaussian mappings",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    keywords="binaural, sound source localization, gaussian mixture, inverse regression, EM",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Topic :: Multimedia :: Sound/Audio :: Analysis",
    ],
)
