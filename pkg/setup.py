from setuptools import setup

setup(
    name="net_changepoint",
    version="0.1.0",
    packages=["netchange", "netchange.tests"],
    url="",
    license="",
    author="",
    author_email="",
    description="Online change-point detection for evolving networks with "
    "generalized hierarchical random graphs",
    install_requires=[
        "networkx>=3.2",
        "numpy>=2.2",
        "pandas>=2.2",
        "scipy>=1.13",
        "torch>=2.8.0",
        "tqdm>=4.66",
    ],
    entry_points={"console_scripts": ["netchange = netchange.cli:main"]},
)
