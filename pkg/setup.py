from setuptools import setup, find_packages

setup(
    name='rpel',
    version='0.1',
    packages=find_packages(include=['rpel', 'rpel.*']),
    python_requires='>=3.10',
    install_requires=[
        'numpy>=1.21',
        'scipy>=1.7',
        'pandas>=1.4',
        'statsmodels>=0.13',
        'joblib>=1.1',
        'psutil>=5.9',
        'colorama>=0.4'
    ],
    extras_require={'test': ['pytest>=7']},
    entry_points={'console_scripts': ['rpel = rpel.cli:_console_main']},
)
