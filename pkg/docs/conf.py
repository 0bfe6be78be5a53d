# ssltr documentation build configuration file.

import os
import sys

sys.path.insert(0, os.path.abspath(".."))

import ssltr  # NOQA: E402

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.viewcode",
]

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"

project = "ssltr"
copyright = "2026, the ssltr contributors"
author = "the ssltr contributors"

version = ".".join(ssltr.__version__.split(".")[:2])
release = ssltr.__version__

exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]
pygments_style = "sphinx"

autodoc_member_order = "bysource"

# -- Options for HTML output ----------------------------------------------

html_theme = "sphinx_rtd_theme"
html_static_path = ["_static"]
htmlhelp_basename = "ssltrdoc"

# -- Options for LaTeX and manual page output -----------------------------

latex_documents = [
    (master_doc, "ssltr.tex", "ssltr Documentation", author, "manual"),
]

man_pages = [(master_doc, "ssltr", "ssltr Documentation", [author], 1)]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable/", None),
    "torch": ("https://pytorch.org/docs/stable/", None),
}
