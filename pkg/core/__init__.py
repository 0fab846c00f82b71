# Reverse-mode differentiation core
