# Sphinx configuration for the adversarial Koopman toolkit docs.

import os
import sys

sys.path.insert(0, os.path.abspath('..'))

project = 'adversarial-koopman-rom'
copyright = '2025, James Mashaka'
author = 'James Mashaka'

try:
    from adv_koopman import __version__
    version = __version__
    release = __version__
except ImportError:
    version = '0.1.0'
    release = '0.1.0'

extensions = [
    'myst_parser',
    'sphinx.ext.autodoc',
    'sphinx.ext.viewcode',
    'sphinx.ext.napoleon',
    'sphinx.ext.mathjax',
]

# Heavy runtime deps are not needed to render the API pages
autodoc_mock_imports = ['torch', 'matplotlib']
autodoc_member_order = 'bysource'

templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
source_suffix = ['.rst', '.md']
root_doc = 'index'

html_theme = 'sphinx_rtd_theme'
html_static_path = ['_static']

myst_enable_extensions = [
    "colon_fence",
    "deflist",
    "dollarmath",
]

napoleon_google_docstring = True
napoleon_numpy_docstring = False
