# agworkforce tests
