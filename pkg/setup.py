from setuptools import setup, find_packages

setup(
    name="ddpc_lab",
    version=open("VERSION").read().strip(),
    license="MIT",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=open("requirements.txt").read().splitlines(),
    extras_require={
        "dev": [
            "pytest",
            "pytest-cov"
        ],
    },
    entry_points={
        'console_scripts': [
            'ddpc-lab=ddpc_lab.runner:main',
        ],
    },
    python_requires='>=3.10',
    description="ARX identification and data-driven predictive control benchmark with control-oriented regularization",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    keywords="mpc,system-identification,arx,kernel,empirical-bayes,admm,monte-carlo,influxdb",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
