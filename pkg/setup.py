from setuptools import setup, find_packages

setup(
    name="earlyexit-lab",
    version="0.1",
    url='http://github.com/praekelt/earlyexit-lab',
    license='BSD',
    author='Praekelt Foundation',
    author_email='dev@praekeltfoundation.org',
    packages=find_packages(exclude=['examples', 'examples.*']),
    include_package_data=True,
    install_requires=[
        'Django>=4.2,<5.0',
        'djangorestframework>=3.14,<4.0',
        'raven==6.10.0',
        'celery>=5.3,<6.0',
        'torch>=2.1',
        'numpy>=1.24',
        'einops>=0.7',
        'Pillow>=10.0',
        'scikit-learn>=1.3',
        'scipy>=1.10',
    ],
    entry_points={
        'console_scripts': [
            'earlyexit-lab = earlyexit_lab.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 4 - Beta',
        'Framework :: Django',
        'License :: OSI Approved :: BSD License',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
)
