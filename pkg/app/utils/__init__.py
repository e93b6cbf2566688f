# Utilities Package
