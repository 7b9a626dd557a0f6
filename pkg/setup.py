from setuptools import setup, find_packages
setup(
    name='dlsense',
    version='0.1.0',
    packages=find_packages(exclude=('tests', 'examples', 'examples.*')),
    include_package_data=True,
    python_requires='>=3.10',
    install_requires=[
        'click',
        'scikit-learn',
        'joblib',
        'numpy',
        'scipy',
        'PyYAML'
    ],
    extras_require={
        'dev': ['pytest']
    },
    entry_points={
        'console_scripts': [
            'dlsense=dlsense.cli:run'
        ]
    }
)
