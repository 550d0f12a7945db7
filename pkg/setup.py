# setup.py
from setuptools import setup, find_packages

setup(
    name='wgmm-streams',
    version='0.1.0',
    description='Online Wasserstein GMM learning and GMM dictionary learning for multi-source domain adaptation',
    # Use 'packages' to automatically find the packages in the src directory
    packages=find_packages(where='src'),
    package_dir={'': 'src'},
    python_requires='>=3.9',
    install_requires=[
        'pyyaml',
        'python-dotenv',
        'pandas',
        'numpy',
        'scipy',
        'POT',
        'scikit-learn',
        'pydantic',
    ],
)
